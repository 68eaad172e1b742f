pub mod numerics;
pub mod geometry;
pub mod channel;
pub mod rss;
pub mod array;
pub mod pme;
pub mod decorrelation;
pub mod doa;
pub mod hybrid;
pub mod harness;
