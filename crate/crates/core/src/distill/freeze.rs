//! Freeze plans: pin selected projection roles (and optionally the MLP)
//! to their post-training-quantization state and exclude them from
//! optimization. The rest of the network trains.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{MicroLM, WeightRole};
use crate::tensor::{Scalar, SharedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FreezeRole {
    Q,
    K,
    V,
    O,
    Mlp,
}

impl FreezeRole {
    fn weight_roles(&self) -> &'static [WeightRole] {
        match self {
            FreezeRole::Q => &[WeightRole::Q],
            FreezeRole::K => &[WeightRole::K],
            FreezeRole::V => &[WeightRole::V],
            FreezeRole::O => &[WeightRole::O],
            FreezeRole::Mlp => &[WeightRole::Gate, WeightRole::Up, WeightRole::Down],
        }
    }
}

/// The set of roles whose weights stay fixed at PTQ values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezePlan {
    pub roles: BTreeSet<FreezeRole>,
}

impl FreezePlan {
    pub fn none() -> Self {
        FreezePlan::default()
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["none", "o", "v", "ov", "qkv", "oqkv"]
    }
}

impl FromStr for FreezePlan {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let roles: BTreeSet<FreezeRole> = match s {
            "none" => BTreeSet::new(),
            "o" => [FreezeRole::O].into(),
            "v" => [FreezeRole::V].into(),
            "ov" => [FreezeRole::O, FreezeRole::V].into(),
            "qkv" => [FreezeRole::Q, FreezeRole::K, FreezeRole::V].into(),
            "oqkv" => [FreezeRole::O, FreezeRole::Q, FreezeRole::K, FreezeRole::V].into(),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown freeze preset '{other}' (expected one of {:?})",
                    Self::preset_names()
                )))
            }
        };
        Ok(FreezePlan { roles })
    }
}

impl fmt::Display for FreezePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let known: &[(&str, &[FreezeRole])] = &[
            ("none", &[]),
            ("o", &[FreezeRole::O]),
            ("v", &[FreezeRole::V]),
            ("ov", &[FreezeRole::O, FreezeRole::V]),
            ("qkv", &[FreezeRole::Q, FreezeRole::K, FreezeRole::V]),
            ("oqkv", &[FreezeRole::O, FreezeRole::Q, FreezeRole::K, FreezeRole::V]),
        ];
        for (name, roles) in known {
            if self.roles == roles.iter().copied().collect() {
                return f.write_str(name);
            }
        }
        write!(f, "{:?}", self.roles)
    }
}

/// Mark frozen weights (requires_grad = false, quantizer frozen) and
/// return their names. Frozen tensors and their quantizer parameters
/// never change for the remainder of the run.
pub fn apply_freeze<T: Scalar>(model: &mut MicroLM<T>, plan: &FreezePlan) -> Vec<String> {
    let mut frozen = Vec::new();
    for role in &plan.roles {
        for &wr in role.weight_roles() {
            for (li, lin) in model.linears_mut(wr).into_iter().enumerate() {
                lin.weight.borrow_mut().requires_grad = false;
                if let Some(q) = &mut lin.quantizer {
                    q.frozen = true;
                }
                frozen.push(MicroLM::<T>::weight_name(li, wr));
            }
        }
    }
    frozen.sort();
    frozen
}

/// Parameters that remain trainable (requires_grad still set).
pub fn trainable_params<T: Scalar>(model: &MicroLM<T>) -> Vec<(String, SharedTensor<T>)> {
    model
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.borrow().requires_grad)
        .collect()
}
