pub mod connector;
pub mod groupby;
pub mod join;
pub mod partition;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use connector::{mton_partition, mton_partition_merge};
pub use groupby::{
    group_all, hashsort_group_by, preclustered_group_by, sort_group_by, Preclustered,
    SpillingGroupBy, Strategy,
};
pub use join::{index_full_outer_join, index_left_outer_join, merge_msg_vid, null_msg, JoinRow};
pub use partition::partition_fn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Join {
    FullOuter,
    LeftOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupBy {
    SortBased,
    HashSort,
    Preclustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connector {
    PartitionPipelined,
    PartitionMergeMaterialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Storage {
    BTree,
    Lsm,
}

/// The physical choices that select one of the sixteen superstep plans.
///
/// `group_by` names the sender-side algorithm. Over the pipelined connector
/// the receiver regroups with the same algorithm; over the merging connector
/// the receiver sees one globally sorted stream and groups it in a single
/// preclustered pass. `Preclustered` with the merging connector is therefore
/// the same plan as `SortBased` with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanConfig {
    pub join: Join,
    pub group_by: GroupBy,
    pub connector: Connector,
    pub storage: Storage,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            join: Join::FullOuter,
            group_by: GroupBy::SortBased,
            connector: Connector::PartitionPipelined,
            storage: Storage::BTree,
        }
    }
}

impl PlanConfig {
    pub fn new(join: Join, group_by: GroupBy, connector: Connector, storage: Storage) -> Self {
        PlanConfig {
            join,
            group_by,
            connector,
            storage,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.group_by == GroupBy::Preclustered && self.connector == Connector::PartitionPipelined
        {
            return Err(
                "preclustered group-by requires the merging connector (connector=merge)"
                    .to_string(),
            );
        }
        Ok(())
    }

    /// The sixteen legal plans in canonical spelling.
    pub fn all() -> Vec<PlanConfig> {
        let strategies = [
            (GroupBy::SortBased, Connector::PartitionPipelined),
            (GroupBy::HashSort, Connector::PartitionPipelined),
            (GroupBy::SortBased, Connector::PartitionMergeMaterialized),
            (GroupBy::HashSort, Connector::PartitionMergeMaterialized),
        ];
        let mut out = Vec::with_capacity(16);
        for join in [Join::FullOuter, Join::LeftOuter] {
            for storage in [Storage::BTree, Storage::Lsm] {
                for (group_by, connector) in strategies {
                    out.push(PlanConfig::new(join, group_by, connector, storage));
                }
            }
        }
        out
    }

    /// Folds equivalent spellings onto the canonical one.
    pub fn canonical(self) -> Self {
        let mut c = self;
        if c.group_by == GroupBy::Preclustered && c.connector == Connector::PartitionMergeMaterialized {
            c.group_by = GroupBy::SortBased;
        }
        c
    }

    /// Algorithm used by the group-by in front of the connector.
    pub fn sender_strategy(&self) -> Strategy {
        match self.group_by {
            GroupBy::HashSort => Strategy::HashSort,
            GroupBy::SortBased | GroupBy::Preclustered => Strategy::Sort,
        }
    }

    pub fn merging(&self) -> bool {
        self.connector == Connector::PartitionMergeMaterialized
    }
}

impl fmt::Display for PlanConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = match self.join {
            Join::FullOuter => "outer",
            Join::LeftOuter => "leftouter",
        };
        let group_by = match self.group_by {
            GroupBy::SortBased => "sort",
            GroupBy::HashSort => "hashsort",
            GroupBy::Preclustered => "preclustered",
        };
        let connector = match self.connector {
            Connector::PartitionPipelined => "pipelined",
            Connector::PartitionMergeMaterialized => "merge",
        };
        let storage = match self.storage {
            Storage::BTree => "btree",
            Storage::Lsm => "lsm",
        };
        write!(f, "{join}/{group_by}/{connector}/{storage}")
    }
}
