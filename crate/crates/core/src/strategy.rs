//! Interchangeable pieces of the registration pipeline, looked up by name.
//!
//! Three families are pluggable:
//!
//! * [`RobustLoss`]: the kernel applied to potential-field residuals
//!   (`huber`, `cauchy`, `l2`).
//! * [`FieldPolicy`]: which potential field a point is registered against
//!   given its predicted polarity (`tsm`: always the combined surface;
//!   `stsm`: the matching signed surface for confidently predicted points).
//! * [`OcclusionFilter`]: which reprojected points take part in a frame
//!   (`none`, or `annf`: one point per nearest edge pixel, nearest depth wins).
//!
//! [`StrategyRegistry::default`] registers all built-ins; callers can add
//! their own before constructing a tracker.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::Vector2;
use thiserror::Error;

use crate::fields::NearestNeighborField;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} strategy `{name}` (available: {available})")]
pub struct UnknownStrategy {
    pub kind: &'static str,
    pub name: String,
    pub available: String,
}

/// Robust kernel `ρ` and its IRLS weight `ρ'(r)/r`.
pub trait RobustLoss: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn cost(&self, r: f64) -> f64;
    fn weight(&self, r: f64) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct Huber {
    pub scale: f64,
}

impl RobustLoss for Huber {
    fn name(&self) -> &str {
        "huber"
    }

    fn cost(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.scale {
            0.5 * r * r
        } else {
            self.scale * (a - 0.5 * self.scale)
        }
    }

    fn weight(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.scale {
            1.0
        } else {
            self.scale / a
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Cauchy {
    pub scale: f64,
}

impl RobustLoss for Cauchy {
    fn name(&self) -> &str {
        "cauchy"
    }

    fn cost(&self, r: f64) -> f64 {
        let c2 = self.scale * self.scale;
        0.5 * c2 * (1.0 + r * r / c2).ln()
    }

    fn weight(&self, r: f64) -> f64 {
        1.0 / (1.0 + r * r / (self.scale * self.scale))
    }
}

/// Plain least squares; the scale is ignored.
#[derive(Debug, Clone, Copy)]
pub struct Squared;

impl RobustLoss for Squared {
    fn name(&self) -> &str {
        "l2"
    }

    fn cost(&self, r: f64) -> f64 {
        0.5 * r * r
    }

    fn weight(&self, _r: f64) -> f64 {
        1.0
    }
}

/// Predicted polarity of the events a map point would trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolarityClass {
    Positive,
    Negative,
    Neutral,
}

/// The potential field a residual is sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldChoice {
    Combined,
    Positive,
    Negative,
}

pub trait FieldPolicy: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// Whether per-point polarity prediction (and the signed surfaces) is needed.
    fn uses_polarity(&self) -> bool;
    fn select(&self, class: PolarityClass) -> FieldChoice;
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedSurface;

impl FieldPolicy for CombinedSurface {
    fn name(&self) -> &str {
        "tsm"
    }

    fn uses_polarity(&self) -> bool {
        false
    }

    fn select(&self, _class: PolarityClass) -> FieldChoice {
        FieldChoice::Combined
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SignedSurfaces;

impl FieldPolicy for SignedSurfaces {
    fn name(&self) -> &str {
        "stsm"
    }

    fn uses_polarity(&self) -> bool {
        true
    }

    fn select(&self, class: PolarityClass) -> FieldChoice {
        match class {
            PolarityClass::Positive => FieldChoice::Positive,
            PolarityClass::Negative => FieldChoice::Negative,
            PolarityClass::Neutral => FieldChoice::Combined,
        }
    }
}

/// A map point reprojected into the current view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub index: usize,
    pub uv: Vector2<f64>,
    pub depth: f64,
}

pub trait OcclusionFilter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn needs_annf(&self) -> bool;
    /// Returns the kept point indices in ascending order.
    fn filter(&self, reprojections: &[Reprojection], annf: Option<&NearestNeighborField>) -> Vec<usize>;
}

#[derive(Debug, Clone, Copy)]
pub struct KeepAll;

impl OcclusionFilter for KeepAll {
    fn name(&self) -> &str {
        "none"
    }

    fn needs_annf(&self) -> bool {
        false
    }

    fn filter(&self, reprojections: &[Reprojection], _annf: Option<&NearestNeighborField>) -> Vec<usize> {
        let mut kept: Vec<usize> = reprojections.iter().map(|r| r.index).collect();
        kept.sort_unstable();
        kept.dedup();
        kept
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NearestEdgeCulling;

impl OcclusionFilter for NearestEdgeCulling {
    fn name(&self) -> &str {
        "annf"
    }

    fn needs_annf(&self) -> bool {
        true
    }

    fn filter(&self, reprojections: &[Reprojection], annf: Option<&NearestNeighborField>) -> Vec<usize> {
        match annf {
            Some(annf) => cull_occluded(reprojections, annf),
            None => KeepAll.filter(reprojections, None),
        }
    }
}

/// Registers each reprojection to the nearest edge pixel of its rounded
/// location; of all points claiming the same edge pixel only the one with the
/// smallest depth (then lowest index) is kept.
pub fn cull_occluded(reprojections: &[Reprojection], annf: &NearestNeighborField) -> Vec<usize> {
    let (w, h) = (annf.width(), annf.height());
    let mut owner: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in reprojections {
        let x = (r.uv.x.round().max(0.0) as usize).min(w - 1);
        let y = (r.uv.y.round().max(0.0) as usize).min(h - 1);
        let edge = annf.nearest(x, y);
        let cand = (r.depth, r.index);
        owner
            .entry(edge)
            .and_modify(|best| {
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    *best = cand;
                }
            })
            .or_insert(cand);
    }
    let mut kept: Vec<usize> = owner.values().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

type LossFactory = Arc<dyn Fn(f64) -> Arc<dyn RobustLoss> + Send + Sync>;

/// Name → implementation tables for every pluggable family.
#[derive(Clone)]
pub struct StrategyRegistry {
    losses: BTreeMap<String, LossFactory>,
    fields: BTreeMap<String, Arc<dyn FieldPolicy>>,
    occlusion: BTreeMap<String, Arc<dyn OcclusionFilter>>,
}

impl fmt::Debug for StrategyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StrategyRegistry")
            .field("losses", &self.losses.keys().collect::<Vec<_>>())
            .field("fields", &self.fields.keys().collect::<Vec<_>>())
            .field("occlusion", &self.occlusion.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register_loss("huber", |s| Arc::new(Huber { scale: s }));
        r.register_loss("cauchy", |s| Arc::new(Cauchy { scale: s }));
        r.register_loss("l2", |_| Arc::new(Squared));
        r.register_field_policy(Arc::new(CombinedSurface));
        r.register_field_policy(Arc::new(SignedSurfaces));
        r.register_occlusion_filter(Arc::new(KeepAll));
        r.register_occlusion_filter(Arc::new(NearestEdgeCulling));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            losses: BTreeMap::new(),
            fields: BTreeMap::new(),
            occlusion: BTreeMap::new(),
        }
    }

    pub fn register_loss<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(f64) -> Arc<dyn RobustLoss> + Send + Sync + 'static,
    {
        self.losses.insert(name.to_string(), Arc::new(factory));
    }

    pub fn register_field_policy(&mut self, policy: Arc<dyn FieldPolicy>) {
        self.fields.insert(policy.name().to_string(), policy);
    }

    pub fn register_occlusion_filter(&mut self, filter: Arc<dyn OcclusionFilter>) {
        self.occlusion.insert(filter.name().to_string(), filter);
    }

    pub fn loss(&self, name: &str, scale: f64) -> Result<Arc<dyn RobustLoss>, UnknownStrategy> {
        self.losses
            .get(name)
            .map(|f| f(scale))
            .ok_or_else(|| unknown("loss", name, self.losses.keys()))
    }

    pub fn field_policy(&self, name: &str) -> Result<Arc<dyn FieldPolicy>, UnknownStrategy> {
        self.fields
            .get(name)
            .cloned()
            .ok_or_else(|| unknown("field", name, self.fields.keys()))
    }

    pub fn occlusion_filter(&self, name: &str) -> Result<Arc<dyn OcclusionFilter>, UnknownStrategy> {
        self.occlusion
            .get(name)
            .cloned()
            .ok_or_else(|| unknown("occlusion", name, self.occlusion.keys()))
    }

    pub fn loss_names(&self) -> Vec<&str> {
        self.losses.keys().map(String::as_str).collect()
    }

    pub fn field_policy_names(&self) -> Vec<&str> {
        self.fields.keys().map(String::as_str).collect()
    }

    pub fn occlusion_filter_names(&self) -> Vec<&str> {
        self.occlusion.keys().map(String::as_str).collect()
    }
}

fn unknown<'a>(kind: &'static str, name: &str, keys: impl Iterator<Item = &'a String>) -> UnknownStrategy {
    UnknownStrategy {
        kind,
        name: name.to_string(),
        available: keys.cloned().collect::<Vec<_>>().join(", "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::build_annf;

    fn reproj(index: usize, u: f64, v: f64, depth: f64) -> Reprojection {
        Reprojection {
            index,
            uv: Vector2::new(u, v),
            depth,
        }
    }

    fn single_edge_annf() -> NearestNeighborField {
        let mut mask = vec![false; 25];
        mask[2 * 5 + 2] = true;
        build_annf(&mask, 5, 5).unwrap()
    }

    #[test]
    fn huber_is_continuous_at_the_scale() {
        let h = Huber { scale: 0.1 };
        assert!((h.cost(0.1) - h.cost(0.1 + 1e-12)).abs() < 1e-12);
        assert_eq!(h.weight(0.05), 1.0);
        assert!((h.weight(1.0) - 0.1).abs() < 1e-15);
        assert!((h.cost(1.0) - 0.095).abs() < 1e-15);
    }

    #[test]
    fn cauchy_weight_matches_derivative() {
        let c = Cauchy { scale: 0.2 };
        let r = 0.3;
        let d = (c.cost(r + 1e-6) - c.cost(r - 1e-6)) / 2e-6;
        assert!((d / r - c.weight(r)).abs() < 1e-6);
    }

    #[test]
    fn nearer_point_wins_a_shared_edge() {
        let annf = single_edge_annf();
        let r = [reproj(0, 0.0, 0.0, 2.0), reproj(1, 4.0, 4.0, 1.0)];
        assert_eq!(cull_occluded(&r, &annf), vec![1]);
    }

    #[test]
    fn depth_ties_keep_lower_index() {
        let annf = single_edge_annf();
        let r = [reproj(3, 0.0, 0.0, 1.0), reproj(1, 4.0, 4.0, 1.0)];
        assert_eq!(cull_occluded(&r, &annf), vec![1]);
    }

    #[test]
    fn distinct_edges_keep_everything() {
        let annf = build_annf(&[true; 9], 3, 3).unwrap();
        let r = [reproj(0, 0.0, 0.0, 5.0), reproj(1, 1.2, 1.0, 1.0), reproj(2, 2.0, 2.4, 3.0)];
        assert_eq!(cull_occluded(&r, &annf), vec![0, 1, 2]);
    }

    #[test]
    fn registry_resolves_builtins_by_name() {
        let reg = StrategyRegistry::default();
        assert_eq!(reg.loss("huber", 0.1).unwrap().name(), "huber");
        assert_eq!(reg.field_policy("stsm").unwrap().select(PolarityClass::Negative), FieldChoice::Negative);
        assert_eq!(reg.field_policy("stsm").unwrap().select(PolarityClass::Neutral), FieldChoice::Combined);
        assert_eq!(reg.field_policy("tsm").unwrap().select(PolarityClass::Positive), FieldChoice::Combined);
        assert!(reg.occlusion_filter("annf").unwrap().needs_annf());
        let err = reg.loss("tukey", 1.0).unwrap_err();
        assert_eq!(err.available, "cauchy, huber, l2");
    }

    #[test]
    fn custom_strategies_can_be_registered() {
        #[derive(Debug)]
        struct DropAll;
        impl OcclusionFilter for DropAll {
            fn name(&self) -> &str {
                "drop"
            }
            fn needs_annf(&self) -> bool {
                false
            }
            fn filter(&self, _: &[Reprojection], _: Option<&NearestNeighborField>) -> Vec<usize> {
                Vec::new()
            }
        }
        let mut reg = StrategyRegistry::default();
        reg.register_occlusion_filter(Arc::new(DropAll));
        assert!(reg.occlusion_filter("drop").unwrap().filter(&[reproj(0, 0.0, 0.0, 1.0)], None).is_empty());
    }

    use proptest::prelude::*;

    /// Nearest edge by exhaustive search; ties go to the smaller row, then column.
    fn brute_nearest(mask: &[bool], w: usize, x: usize, y: usize) -> (usize, usize) {
        let mut best = (u64::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (ex, ey) = (i % w, i / w);
            let d = (ex.abs_diff(x).pow(2) + ey.abs_diff(y).pow(2)) as u64;
            if (d, ey, ex) < best {
                best = (d, ey, ex);
            }
        }
        (best.2, best.1)
    }

    fn scenario() -> impl Strategy<Value = (Vec<bool>, Vec<Reprojection>)> {
        let mask = prop::collection::vec(prop::bool::weighted(0.08), 20 * 16)
            .prop_map(|mut m| {
                m[5 * 20 + 7] = true;
                m
            });
        let reprojections = prop::collection::vec((-2.0..22.0f64, -2.0..18.0f64, 0.5..4.0f64), 0..60).prop_map(|v| {
            v.into_iter()
                .enumerate()
                // Quantised depths produce ties.
                .map(|(i, (u, v, d))| reproj(i, u, v, (d * 4.0).round() / 4.0))
                .collect::<Vec<_>>()
        });
        (mask, reprojections)
    }

    proptest! {
        #[test]
        fn culling_matches_group_by_min((mask, reprojections) in scenario()) {
            let (w, h) = (20, 16);
            let annf = build_annf(&mask, w, h).unwrap();
            let mut groups: BTreeMap<(usize, usize), Vec<(f64, usize)>> = BTreeMap::new();
            for r in &reprojections {
                let x = (r.uv.x.round().max(0.0) as usize).min(w - 1);
                let y = (r.uv.y.round().max(0.0) as usize).min(h - 1);
                groups.entry(brute_nearest(&mask, w, x, y)).or_default().push((r.depth, r.index));
            }
            let mut expected: Vec<usize> = groups
                .values()
                .map(|g| g.iter().copied().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap().1)
                .collect();
            expected.sort_unstable();
            prop_assert_eq!(cull_occluded(&reprojections, &annf), expected);
        }

        #[test]
        fn culling_is_idempotent((mask, reprojections) in scenario()) {
            let annf = build_annf(&mask, 20, 16).unwrap();
            let kept = cull_occluded(&reprojections, &annf);
            let survivors: Vec<Reprojection> = reprojections.iter().filter(|r| kept.contains(&r.index)).copied().collect();
            prop_assert_eq!(cull_occluded(&survivors, &annf), kept.clone());
            let filter = NearestEdgeCulling;
            prop_assert_eq!(filter.filter(&reprojections, Some(&annf)), kept);
        }
    }
}
