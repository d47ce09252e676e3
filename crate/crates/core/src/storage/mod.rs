pub mod btree;
pub mod cache;
pub mod index;
pub mod lsm;
pub mod msgstore;

pub use cache::{BufferCache, CacheSnapshot, PAGE_SIZE};
pub use index::{IndexCursor, IndexOptions, VertexIndex, VidIndex};
pub use msgstore::{read_msgs, write_msgs, MsgReader, MsgWriter, RunFile};
