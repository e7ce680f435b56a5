// SPDX-License-Identifier: Apache-2.0

pub mod accel;
pub mod batch;
pub mod inference;
pub mod metrics;
pub mod queueing;
pub mod scenario;
pub mod sim;
