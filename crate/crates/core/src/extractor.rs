//! Group-based extractor.
//!
//! A voxel vector of any length `D_i` is reduced to a fixed `(G × K)` grid:
//! `G` key voxels are spread uniformly over the voxel axis and each key
//! gathers its `K` nearest voxels by index distance. A local affine map
//! (`K → D_l`) runs on every group, the local codes are flattened and a
//! global affine map (`G·D_l → D_b`) produces the brain representation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Params, Real, Visit, VisitMut};

/// `key_g = floor(g · D_i / G)` for `g in 0..G`.
pub fn select_key_voxels(voxel_count: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || voxel_count < groups {
        return Err(Error::Config(format!("cannot select {groups} key voxels from {voxel_count} voxels")));
    }
    Ok((0..groups).map(|g| g * voxel_count / groups).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub subject_id: u32,
    pub voxel_count: usize,
    pub key_indices: Vec<usize>,
    /// G rows of K ascending voxel indices
    pub member_indices: Vec<Vec<usize>>,
}

/// For every key, the `K` voxels closest in index, ties toward the lower index.
///
/// The nearest set of a key is always a contiguous window: it grows
/// `c, c-1, c+1, c-2, c+2, ...`, so without boundaries it is
/// `[c - K/2, c - K/2 + K)`; at the ends it is clamped into `[0, D_i)`.
pub fn build_grouping_plan(
    subject_id: u32,
    voxel_count: usize,
    groups: usize,
    group_size: usize,
) -> Result<GroupingPlan> {
    if group_size == 0 || voxel_count < group_size {
        return Err(Error::Config(format!("group size {group_size} exceeds voxel count {voxel_count}")));
    }
    let key_indices = select_key_voxels(voxel_count, groups)?;
    let member_indices = key_indices
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(group_size / 2).min(voxel_count - group_size);
            (lo..lo + group_size).collect()
        })
        .collect();
    Ok(GroupingPlan { subject_id, voxel_count, key_indices, member_indices })
}

impl GroupingPlan {
    pub fn groups(&self) -> usize {
        self.key_indices.len()
    }

    pub fn group_size(&self) -> usize {
        self.member_indices.first().map_or(0, Vec::len)
    }

    /// Fraction of voxels that belong to at least one group.
    pub fn coverage(&self) -> f64 {
        let mut seen = vec![false; self.voxel_count];
        for row in &self.member_indices {
            for &i in row {
                seen[i] = true;
            }
        }
        seen.iter().filter(|&&b| b).count() as f64 / self.voxel_count as f64
    }

    /// Write `plan_subj_<id>.json` into `dir`.
    pub fn write_json(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("plan_subj_{}.json", self.subject_id));
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Gather `voxels` into a `(G × K)` grouped signal.
    pub fn apply<F: Real>(&self, voxels: &[F]) -> Result<Array2<F>> {
        apply_grouping(voxels, self)
    }
}

/// Pure gather by the plan.
pub fn apply_grouping<F: Real>(voxels: &[F], plan: &GroupingPlan) -> Result<Array2<F>> {
    if voxels.len() != plan.voxel_count {
        return Err(Error::Shape(format!(
            "recording has {} voxels, plan for subject {} expects {}",
            voxels.len(),
            plan.subject_id,
            plan.voxel_count
        )));
    }
    let (g, k) = (plan.groups(), plan.group_size());
    Ok(Array2::from_shape_fn((g, k), |(r, c)| voxels[plan.member_indices[r][c]]))
}

/// Adjoint of [`apply_grouping`]: scatter-add a grouped gradient back onto voxels.
pub fn scatter_grouping_grad<F: Real>(grad: ArrayView2<F>, plan: &GroupingPlan) -> Vec<F> {
    let mut out = vec![F::zero(); plan.voxel_count];
    for (row, idx) in grad.outer_iter().zip(&plan.member_indices) {
        for (&g, &i) in row.iter().zip(idx) {
            out[i] += g;
        }
    }
    out
}

/// Grouping plans keyed by subject, built on demand.
#[derive(Clone, Debug, Default)]
pub struct PlanCache {
    groups: usize,
    group_size: usize,
    plans: BTreeMap<u32, GroupingPlan>,
}

impl PlanCache {
    pub fn new(groups: usize, group_size: usize) -> Self {
        Self { groups, group_size, plans: BTreeMap::new() }
    }

    pub fn get_or_build(&mut self, subject_id: u32, voxel_count: usize) -> Result<&GroupingPlan> {
        let stale = self.plans.get(&subject_id).is_some_and(|p| p.voxel_count != voxel_count);
        if stale || !self.plans.contains_key(&subject_id) {
            let plan = build_grouping_plan(subject_id, voxel_count, self.groups, self.group_size)?;
            self.plans.insert(subject_id, plan);
        }
        Ok(&self.plans[&subject_id])
    }

    pub fn get(&self, subject_id: u32) -> Option<&GroupingPlan> {
        self.plans.get(&subject_id)
    }

    pub fn plans(&self) -> impl Iterator<Item = &GroupingPlan> {
        self.plans.values()
    }
}

/// Local (`K → D_l`, shared across groups) and global (`G·D_l → D_b`) affine maps.
#[derive(Clone, Debug)]
pub struct Extractor<F: Real> {
    pub groups: usize,
    pub local: Linear<F>,
    pub global: Linear<F>,
}

pub struct ExtractorCache<F: Real> {
    input: Array2<F>,
    local_out: Array2<F>,
}

impl<F: Real> Extractor<F> {
    pub fn new<R: Rng>(groups: usize, group_size: usize, local_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            groups,
            local: Linear::new(group_size, local_dim, rng),
            global: Linear::new(groups * local_dim, width, rng),
        }
    }

    pub fn zeros(groups: usize, group_size: usize, local_dim: usize, width: usize) -> Self {
        Self { groups, local: Linear::zeros(group_size, local_dim), global: Linear::zeros(groups * local_dim, width) }
    }

    pub fn param_count(groups: usize, group_size: usize, local_dim: usize, width: usize) -> usize {
        group_size * local_dim + local_dim + groups * local_dim * width + width
    }

    /// `grouped` stacks `B` grouped signals as `(B·G × K)`; output is `(B × D_b)`.
    pub fn forward(&self, grouped: ArrayView2<F>) -> Result<(Array2<F>, ExtractorCache<F>)> {
        let (rows, k) = grouped.dim();
        if k != self.local.fan_in() || rows % self.groups != 0 {
            return Err(Error::Shape(format!(
                "grouped input ({rows} × {k}) does not match G={} K={}",
                self.groups,
                self.local.fan_in()
            )));
        }
        let b = rows / self.groups;
        let local_out = self.local.forward(grouped);
        let flat = local_out.view().into_shape_with_order((b, self.groups * self.local.fan_out())).expect("contiguous");
        let rep = self.global.forward(flat);
        Ok((rep, ExtractorCache { input: grouped.to_owned(), local_out }))
    }

    pub fn backward(&self, cache: &ExtractorCache<F>, d_rep: ArrayView2<F>, grad: &mut Self) {
        let b = d_rep.nrows();
        let flat =
            cache.local_out.view().into_shape_with_order((b, self.groups * self.local.fan_out())).expect("contiguous");
        let d_flat = self.global.backward(flat, d_rep, &mut grad.global);
        let d_local = d_flat.into_shape_with_order((b * self.groups, self.local.fan_out())).expect("contiguous");
        self.local.backward_params(cache.input.view(), d_local.view(), &mut grad.local);
    }
}

impl<F: Real> Params<F> for Extractor<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        self.local.visit(&join(prefix, "local"), f);
        self.global.visit(&join(prefix, "global"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        self.local.visit_mut(&join(prefix, "local"), f);
        self.global.visit_mut(&join(prefix, "global"), f);
    }
}

/// One extractor shared by all subjects (unified) or one per training
/// subject (subject-specific mode). The two are never mixed.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum ExtractorBank<F: Real> {
    Unified(Extractor<F>),
    PerSubject(BTreeMap<u32, Extractor<F>>),
}

pub enum BankCache<F: Real> {
    Unified(ExtractorCache<F>),
    /// (subject, batch rows routed to it, cache)
    PerSubject(Vec<(u32, Vec<usize>, ExtractorCache<F>)>),
}

impl<F: Real> ExtractorBank<F> {
    pub fn len(&self) -> usize {
        match self {
            Self::Unified(_) => 1,
            Self::PerSubject(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `grouped` is `(B·G × K)`, `subjects` has length `B`.
    pub fn forward(&self, grouped: ArrayView2<F>, subjects: &[u32]) -> Result<(Array2<F>, BankCache<F>)> {
        match self {
            Self::Unified(e) => {
                let (rep, c) = e.forward(grouped)?;
                Ok((rep, BankCache::Unified(c)))
            }
            Self::PerSubject(map) => {
                let g = map.values().next().map_or(1, |e| e.groups);
                let width = map.values().next().map_or(0, |e| e.global.fan_out());
                let mut out = Array2::zeros((subjects.len(), width));
                let mut caches = Vec::new();
                let mut routed: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
                for (i, &s) in subjects.iter().enumerate() {
                    routed.entry(s).or_default().push(i);
                }
                for (s, rows) in routed {
                    let e = map
                        .get(&s)
                        .ok_or_else(|| Error::Config(format!("no subject-specific extractor for subject {s}")))?;
                    let mut sub = Array2::zeros((rows.len() * g, grouped.ncols()));
                    for (j, &r) in rows.iter().enumerate() {
                        sub.slice_mut(s![j * g..(j + 1) * g, ..]).assign(&grouped.slice(s![r * g..(r + 1) * g, ..]));
                    }
                    let (rep, c) = e.forward(sub.view())?;
                    for (j, &r) in rows.iter().enumerate() {
                        out.row_mut(r).assign(&rep.row(j));
                    }
                    caches.push((s, rows, c));
                }
                Ok((out, BankCache::PerSubject(caches)))
            }
        }
    }

    pub fn backward(&self, cache: &BankCache<F>, d_rep: ArrayView2<F>, grad: &mut Self) {
        match (self, cache, grad) {
            (Self::Unified(e), BankCache::Unified(c), Self::Unified(g)) => e.backward(c, d_rep, g),
            (Self::PerSubject(map), BankCache::PerSubject(caches), Self::PerSubject(gmap)) => {
                for (s, rows, c) in caches {
                    let mut d = Array2::zeros((rows.len(), d_rep.ncols()));
                    for (j, &r) in rows.iter().enumerate() {
                        d.row_mut(j).assign(&d_rep.row(r));
                    }
                    map[s].backward(c, d.view(), gmap.get_mut(s).expect("gradient bank mirrors params"));
                }
            }
            _ => panic!("extractor bank, cache and gradient disagree on mode"),
        }
    }
}

impl<F: Real> Params<F> for ExtractorBank<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        match self {
            Self::Unified(e) => e.visit(prefix, f),
            Self::PerSubject(m) => {
                for (s, e) in m {
                    e.visit(&join(prefix, &format!("subj_{s}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        match self {
            Self::Unified(e) => e.visit_mut(prefix, f),
            Self::PerSubject(m) => {
                for (s, e) in m.iter_mut() {
                    e.visit_mut(&join(prefix, &format!("subj_{s}")), f);
                }
            }
        }
    }
}
