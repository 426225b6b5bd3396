//! Desk-scale toolkit for implanting object-detection backdoors into a tiny
//! trainable detector on synthetic scenes, mitigating them with
//! detection-aware adversarial fine-tuning, and mechanically checking the
//! score-margin algebra the method is built on.

pub mod advgen;
pub mod attack;
pub mod boxes;
pub mod data;
pub mod defense;
pub mod detector;
pub mod eval;
pub mod gate;
pub mod image;
pub mod margin;
pub mod props;
pub mod runconfig;
