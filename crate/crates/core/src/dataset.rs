use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::response::Example;
use crate::types::{Dims, ImpressionTensor, Order, PriceSeries, UserFeatures, UserId};

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub id: UserId,
    pub impressions: ImpressionTensor,
    pub features: UserFeatures,
}

/// Per-cell click counts, used only by the last-click comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClickRecord {
    pub user_id: UserId,
    pub brand: u32,
    pub position: u32,
    pub day: u32,
    pub clicks: u32,
}

/// A fully validated attribution window: every user's impressions and
/// features, the shared price series, and all observed orders.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub feature_len: usize,
    /// Sorted by user id.
    pub users: Vec<UserRecord>,
    pub prices: PriceSeries,
    /// Sorted by `(user, brand, day)`.
    pub orders: Vec<Order>,
    pub clicks: Option<Vec<ClickRecord>>,
    index: HashMap<UserId, usize>,
}

impl Dataset {
    /// Assembles a dataset, sorting users and orders into canonical order.
    pub fn new(
        dims: Dims,
        feature_len: usize,
        mut users: Vec<UserRecord>,
        prices: PriceSeries,
        mut orders: Vec<Order>,
        clicks: Option<Vec<ClickRecord>>,
    ) -> Self {
        users.sort_by_key(|u| u.id);
        orders.sort_unstable();
        let index = users.iter().enumerate().map(|(i, u)| (u.id, i)).collect();
        Dataset {
            dims,
            feature_len,
            users,
            prices,
            orders,
            clicks: clicks.map(|mut c| {
                c.sort_unstable();
                c
            }),
            index,
        }
    }

    pub fn user(&self, id: UserId) -> Option<&UserRecord> {
        self.index.get(&id).map(|&i| &self.users[i])
    }

    pub fn user_index(&self, id: UserId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Orders placed on `day`.
    pub fn orders_on(&self, day: u32) -> Vec<Order> {
        self.orders
            .iter()
            .filter(|o| o.day == day)
            .copied()
            .collect()
    }

    /// Day-major `T·B` purchase labels for every user (aligned with `users`).
    pub fn label_matrix(&self) -> Vec<Vec<u8>> {
        let b = self.dims.brands as usize;
        let mut labels = vec![vec![0u8; self.dims.days as usize * b]; self.users.len()];
        for o in &self.orders {
            if let Some(i) = self.user_index(o.user_id) {
                labels[i][o.day as usize * b + o.brand as usize] = 1;
            }
        }
        labels
    }

    /// Training examples borrowing `labels` from [`Dataset::label_matrix`].
    pub fn examples<'a>(&'a self, labels: &'a [Vec<u8>]) -> Vec<Example<'a>> {
        self.users
            .iter()
            .zip(labels)
            .map(|(u, l)| Example {
                tensor: &u.impressions,
                features: &u.features,
                labels: l,
            })
            .collect()
    }
}
