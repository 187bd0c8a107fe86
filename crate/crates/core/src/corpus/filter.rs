use std::collections::HashMap;

use super::Interaction;
use crate::error::{Error, Result};

/// Removes users and items with fewer than `min_actions` interactions,
/// repeating until no row is removed. Surviving rows keep input order.
pub fn five_core_filter(interactions: &[Interaction], min_actions: usize) -> Result<Vec<Interaction>> {
    if min_actions == 0 {
        return Err(Error::Config("min_actions must be at least 1".into()));
    }
    let mut rows: Vec<&Interaction> = interactions.iter().collect();
    let mut passes = 0usize;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for it in &rows {
            *users.entry(&it.user_id).or_default() += 1;
            *items.entry(&it.item_id).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|it| users[it.user_id.as_str()] >= min_actions && items[it.item_id.as_str()] >= min_actions);
        passes += 1;
        if rows.len() == before {
            break;
        }
    }
    log::debug!("{}-core filter converged after {passes} passes", min_actions);
    if rows.is_empty() && !interactions.is_empty() {
        log::warn!("{min_actions}-core filtering removed every interaction");
    }
    Ok(rows.into_iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(u: &str, i: &str) -> Interaction {
        Interaction::new(u, i, 0)
    }

    #[test]
    fn already_dense_is_unchanged() {
        let mut log = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                log.push(row(&format!("u{u}"), &format!("i{i}")));
            }
        }
        assert_eq!(five_core_filter(&log, 5).unwrap(), log);
    }

    #[test]
    fn removal_cascades_to_items() {
        // "weak" has 3 actions and i4 has 3; both go, leaving a 4x4 core.
        let mut log = Vec::new();
        for u in 0..4 {
            for i in 0..4 {
                log.push(row(&format!("u{u}"), &format!("i{i}")));
            }
        }
        log.push(row("u0", "i4"));
        log.push(row("u1", "i4"));
        log.push(row("u2", "i4"));
        for i in 0..4 {
            log.push(row("weak", &format!("i{i}")));
        }
        log.truncate(log.len() - 1);
        let out = five_core_filter(&log, 4).unwrap();
        assert!(out.iter().all(|it| it.user_id != "weak" && it.item_id != "i4"));
        assert_eq!(out.len(), 16);
    }

    #[test]
    fn rejects_zero_threshold() {
        assert!(five_core_filter(&[], 0).is_err());
    }
}
