//! Guide listings compiled as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/container.md")]
pub mod container {}
#[doc = include_str!("../../../book/src/entropy.md")]
pub mod entropy {}
#[doc = include_str!("../../../book/src/smplx.md")]
pub mod smplx {}
#[doc = include_str!("../../../book/src/posemaps.md")]
pub mod posemaps {}
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../../book/src/pose_space.md")]
pub mod pose_space {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/fitting.md")]
pub mod fitting {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
