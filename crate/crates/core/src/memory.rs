//! Sparse byte-addressable physical memory. Untouched pages read as zero.

use std::collections::BTreeMap;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memory {
    size: u64,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl Memory {
    pub fn new(size: u64) -> Memory {
        Memory { size, pages: BTreeMap::new() }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    fn assert_in_range(&self, addr: u64, len: u64) {
        assert!(
            addr.checked_add(len).is_some_and(|end| end <= self.size),
            "physical access {addr:#x}+{len:#x} beyond memory size {:#x}",
            self.size
        );
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) {
        self.assert_in_range(addr, buf.len() as u64);
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE_SIZE, (a % PAGE_SIZE) as usize);
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub fn read_vec(&self, addr: u64, len: u64) -> Vec<u8> {
        let mut v = vec![0; len as usize];
        self.read(addr, &mut v);
        v
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        self.assert_in_range(addr, data.len() as u64);
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE_SIZE, (a % PAGE_SIZE) as usize);
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        let mut b = [0u8; 8];
        self.read(addr, &mut b);
        u64::from_le_bytes(b)
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) {
        self.write(addr, &v.to_le_bytes());
    }

    /// Zeroes `[addr, addr + len)`, dropping pages that become fully zero.
    pub fn zero(&mut self, addr: u64, len: u64) {
        self.assert_in_range(addr, len);
        let end = addr + len;
        let first = addr / PAGE_SIZE;
        let last = end.div_ceil(PAGE_SIZE);
        let touched: Vec<u64> = self.pages.range(first..last).map(|(k, _)| *k).collect();
        for page in touched {
            let pstart = page * PAGE_SIZE;
            let lo = addr.max(pstart);
            let hi = end.min(pstart + PAGE_SIZE);
            if lo == pstart && hi == pstart + PAGE_SIZE {
                self.pages.remove(&page);
            } else if let Some(p) = self.pages.get_mut(&page) {
                p[(lo - pstart) as usize..(hi - pstart) as usize].fill(0);
            }
        }
    }

    pub fn is_zero(&self, addr: u64, len: u64) -> bool {
        self.assert_in_range(addr, len);
        let end = addr + len;
        self.pages.range(addr / PAGE_SIZE..end.div_ceil(PAGE_SIZE)).all(|(&page, p)| {
            let pstart = page * PAGE_SIZE;
            let lo = (addr.max(pstart) - pstart) as usize;
            let hi = (end.min(pstart + PAGE_SIZE) - pstart) as usize;
            p[lo..hi].iter().all(|&b| b == 0)
        })
    }

    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }
}
