use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Id of the first task token.
pub const TASK_OFFSET: usize = 3;

/// Token inventory: three framework specials followed by a contiguous block
/// of task symbols `first_symbol..first_symbol + size - 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    first_symbol: u32,
}

impl Vocab {
    pub fn new(task_symbols: usize, first_symbol: u32) -> Result<Self> {
        if task_symbols == 0 {
            return Err(Error::Config("vocabulary needs at least one task symbol".into()));
        }
        Ok(Self {
            size: task_symbols + TASK_OFFSET,
            first_symbol,
        })
    }

    /// Total size V including specials.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn task_symbols(&self) -> usize {
        self.size - TASK_OFFSET
    }

    pub fn first_symbol(&self) -> u32 {
        self.first_symbol
    }

    pub fn is_task(&self, id: usize) -> bool {
        (TASK_OFFSET..self.size).contains(&id)
    }

    pub fn id(&self, symbol: u32) -> Result<usize> {
        let rel = symbol
            .checked_sub(self.first_symbol)
            .map(|r| r as usize)
            .filter(|&r| r < self.task_symbols())
            .ok_or_else(|| Error::Data(format!("symbol {symbol} is not in the vocabulary")))?;
        Ok(rel + TASK_OFFSET)
    }

    pub fn symbol(&self, id: usize) -> Option<u32> {
        self.is_task(id)
            .then(|| (id - TASK_OFFSET) as u32 + self.first_symbol)
    }

    pub fn encode(&self, symbols: &[u32]) -> Result<Vec<usize>> {
        symbols.iter().map(|&s| self.id(s)).collect()
    }

    /// Task symbols of `ids`, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<u32> {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    /// All task symbols in id order.
    pub fn symbols(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.task_symbols() as u32).map(move |r| r + self.first_symbol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let v = Vocab::new(23, 1).unwrap();
        assert_eq!(v.size(), 26);
        assert_eq!(v.id(1).unwrap(), 3);
        assert_eq!(v.id(23).unwrap(), 25);
        assert!(v.id(24).is_err() && v.id(0).is_err());
        assert_eq!(v.symbol(3), Some(1));
        assert_eq!(v.symbol(PAD), None);
        assert_eq!(v.decode(&[SOS, 5, 6, EOS, PAD]), vec![3, 4]);
    }
}
