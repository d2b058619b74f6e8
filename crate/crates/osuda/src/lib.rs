//! One-shot unsupervised domain adaptation for semantic segmentation,
//! scaled down to a synthetic desk benchmark.
//!
//! A small convolutional segmentor is trained on labeled source scenes,
//! then adapted to a shifted target domain using exactly one unlabeled
//! target image. Adaptation combines two training-free ingredients:
//!
//! * **style mixing** — source feature statistics are blended with the
//!   target image's statistics (plus a perturbation scaled by the
//!   domain gap) at the input and a mid-network tap, so the segmentor
//!   sees many target-ish styles of the same labeled content;
//! * **patch prototypes** — the target feature map is cut into patches
//!   whose mean vectors act as prototypes; cosine similarity against
//!   them, discounted by prediction entropy, weights the per-pixel loss
//!   on stylized source images.
//!
//! Neither ingredient adds learnable parameters.
//!
//! Start with the runnable walkthroughs in `examples/` — one per major
//! capability — or the `osuda` binary whose subcommands chain into a
//! full experiment (`gen-data`, `pretrain`, `adapt`, `eval`, `ablate`).

pub mod adapt;
pub mod benchdata;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod protomatch;
pub mod rng;
pub mod segmentor;
pub mod stylemix;
pub mod tensor;

pub use adapt::{AdaptConfig, AdaptOutcome, ConfVariant, RunResult};
pub use benchdata::{BenchSpec, Benchmark, Dataset, DomainSpec, LabelMap, MetricsReport};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use segmentor::{Arch, Segmentor};
pub use stylemix::{MixSite, MixingRule};
pub use tensor::{Tape, Tensor, Val};
