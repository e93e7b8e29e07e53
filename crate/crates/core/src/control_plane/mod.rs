//! Control plane: writer rank 0 and reader rank 0 negotiate step
//! availability and release over one TCP connection per reader cohort.

pub mod contact;
pub mod protocol;
mod reader;
mod writer;

pub use contact::{ContactSink, ContactSource};
pub use protocol::{ReaderState, StepOutcome, WriterEvent};
pub use reader::{BeginStatus, ReaderOptions, ReaderStream};
pub use writer::{WriterOptions, WriterStream};
