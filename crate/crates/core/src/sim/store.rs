//! Sequential semantics of one table or object store. Every method is one
//! atomic step; the simulator serializes them.

use std::collections::BTreeMap;

use crate::shim::{BitmapState, DsKind, ShimError, StoredValue, TABLE_ITEM_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Store {
    pub kind: DsKind,
    pub items: BTreeMap<String, StoredValue>,
}

impl Store {
    pub fn new(kind: DsKind) -> Self {
        Self {
            kind,
            items: BTreeMap::new(),
        }
    }

    fn check_size(&self, size: usize) -> Result<(), ShimError> {
        if self.kind == DsKind::Table && size > TABLE_ITEM_LIMIT {
            return Err(ShimError::ValueTooLarge {
                size,
                limit: TABLE_ITEM_LIMIT,
            });
        }
        Ok(())
    }

    fn create(&mut self, key: &str, value: StoredValue) -> Result<bool, ShimError> {
        if key.is_empty() {
            return Err(ShimError::InvalidArgument("empty key".into()));
        }
        if self.items.contains_key(key) {
            return Ok(false);
        }
        self.items.insert(key.to_string(), value);
        Ok(true)
    }

    pub fn store_output_data(&mut self, key: &str, data: &[u8]) -> Result<bool, ShimError> {
        self.check_size(data.len())?;
        self.create(key, StoredValue::Item(data.to_vec()))
    }

    pub fn get_value(&self, key: &str) -> Option<StoredValue> {
        self.items.get(key).cloned()
    }

    pub fn create_invocation_list(&mut self, key: &str) -> Result<bool, ShimError> {
        self.create(key, StoredValue::List(Vec::new()))
    }

    pub fn append_and_get_list(&mut self, key: &str, names: &[String]) -> Result<Vec<String>, ShimError> {
        let list = match self.items.get_mut(key) {
            Some(StoredValue::List(l)) => l,
            Some(_) => return Err(ShimError::WrongType(key.to_string())),
            None => return Err(ShimError::MissingList(key.to_string())),
        };
        for n in names {
            if !list.contains(n) {
                list.push(n.clone());
            }
        }
        Ok(list.clone())
    }

    pub fn create_bitmap(&mut self, size: usize, key: &str) -> Result<bool, ShimError> {
        if size == 0 {
            return Err(ShimError::InvalidArgument("bitmap size must be >= 1".into()));
        }
        self.create(key, StoredValue::Bitmap(BitmapState::new(size)))
    }

    pub fn update_bitmap(&mut self, index: usize, key: &str) -> Result<BitmapState, ShimError> {
        let b = match self.items.get_mut(key) {
            Some(StoredValue::Bitmap(b)) => b,
            Some(_) => return Err(ShimError::WrongType(key.to_string())),
            None => return Err(ShimError::MissingBitmap(key.to_string())),
        };
        if index >= b.bits.len() {
            return Err(ShimError::IndexOutOfRange {
                index,
                size: b.bits.len(),
            });
        }
        if !b.bits[index] {
            b.bits[index] = true;
            if b.all_set() {
                b.completed_by = Some(index);
            }
        }
        Ok(b.clone())
    }

    pub fn list_keys(&self, prefix: &str) -> Vec<String> {
        self.items
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn delete(&mut self, key: &str) -> bool {
        self.items.remove(key).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_create_keeps_first_value() {
        let mut s = Store::new(DsKind::Table);
        assert!(s.store_output_data("k", b"one").unwrap());
        assert!(!s.store_output_data("k", b"two").unwrap());
        assert_eq!(s.get_value("k"), Some(StoredValue::Item(b"one".to_vec())));
        assert_eq!(s.get_value("absent"), None);
    }

    #[test]
    fn lists_append_with_set_semantics() {
        let mut s = Store::new(DsKind::Table);
        assert!(matches!(
            s.append_and_get_list("l", &["B".into()]),
            Err(ShimError::MissingList(_))
        ));
        assert!(s.create_invocation_list("l").unwrap());
        assert_eq!(s.append_and_get_list("l", &["B".into()]).unwrap(), vec!["B"]);
        assert!(!s.create_invocation_list("l").unwrap());
        let ten: Vec<String> = (0..10).map(|i| format!("N{i}")).collect();
        assert_eq!(s.append_and_get_list("l", &ten).unwrap().len(), 11);
        assert_eq!(s.append_and_get_list("l", &["B".into()]).unwrap().len(), 11);
    }

    #[test]
    fn bitmap_updates() {
        let mut s = Store::new(DsKind::Table);
        assert!(s.create_bitmap(3, "b").unwrap());
        assert!(!s.create_bitmap(3, "b").unwrap());
        assert_eq!(s.update_bitmap(0, "b").unwrap().bits, vec![true, false, false]);
        assert_eq!(s.update_bitmap(0, "b").unwrap().bits, vec![true, false, false]);
        s.update_bitmap(2, "b").unwrap();
        let done = s.update_bitmap(1, "b").unwrap();
        assert!(done.all_set());
        assert_eq!(done.completed_by, Some(1));
        // re-update after completion leaves the closer unchanged
        assert_eq!(s.update_bitmap(2, "b").unwrap().completed_by, Some(1));
        assert!(matches!(
            s.update_bitmap(3, "b"),
            Err(ShimError::IndexOutOfRange { index: 3, size: 3 })
        ));
        assert_eq!(s.create_bitmap(1, "one"), Ok(true));
        assert!(s.create_bitmap(0, "zero").is_err());
    }

    #[test]
    fn table_limit_and_prefix_scan() {
        let mut t = Store::new(DsKind::Table);
        let big = vec![0u8; TABLE_ITEM_LIMIT + 1];
        assert!(matches!(
            t.store_output_data("w/x", &big),
            Err(ShimError::ValueTooLarge { .. })
        ));
        let mut o = Store::new(DsKind::Object);
        assert!(o.store_output_data("w/x", &big).unwrap());
        t.store_output_data("w/a", b"1").unwrap();
        t.store_output_data("w2/a", b"1").unwrap();
        t.store_output_data("collab/a", b"1").unwrap();
        assert_eq!(t.list_keys("w/"), vec!["w/a"]);
        assert!(t.delete("w/a"));
        assert!(!t.delete("w/a"));
    }
}
