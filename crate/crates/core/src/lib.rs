// SPDX-License-Identifier: Apache-2.0

pub mod cli;
pub mod overlay;
pub mod protocol;
pub mod simulator;
pub mod topology;
