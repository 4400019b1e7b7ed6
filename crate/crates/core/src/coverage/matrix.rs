//! Precomputed candidate-to-variation coverage bits.
//!
//! Variations are indexed `v = group * n_tf + j`, where a group is one
//! (user, fit type) prescription in dataset order and `j` the transfer
//! function. Each candidate row stores only the groups it touches, as
//! `words_per_group` masks over `j`, so a row is a blocked sparse bitset over
//! the whole variation index.

use rayon::prelude::*;

use super::CoverageParams;
use crate::bitset::{iter_word_ones, words_for, BitSet};
use crate::error::{Error, Result};
use crate::model::{apply_transfer, Configuration, Dataset, FitType, TransferFunctionBank};

/// Decoded variation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariationRef {
    pub user: usize,
    pub fit: FitType,
    pub tf: usize,
}

#[derive(Clone, Debug)]
pub struct CoverageMatrix {
    n_candidates: usize,
    n_tf: usize,
    words_per_group: usize,
    radius: f64,
    group_user: Vec<u32>,
    group_fit: Vec<FitType>,
    user_groups: Vec<(u32, u32)>,
    user_weights: Vec<f64>,
    tf_weights: Vec<f64>,
    row_offsets: Vec<usize>,
    block_group: Vec<u32>,
    block_bits: Vec<u64>,
}

impl CoverageMatrix {
    /// Tests every candidate against every variation.
    pub fn precompute(
        candidates: &[Configuration],
        dataset: &Dataset,
        bank: &TransferFunctionBank,
        params: &CoverageParams,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::param("no candidate presets"));
        }
        let n_tf = bank.len();
        let words_per_group = words_for(n_tf);

        let mut group_user = Vec::new();
        let mut group_fit = Vec::new();
        let mut user_groups = Vec::with_capacity(dataset.len());
        let mut variations = Vec::with_capacity(dataset.variation_count(bank));
        for (ui, user) in dataset.users().iter().enumerate() {
            let start = group_user.len() as u32;
            for (fit, config) in &user.configs {
                group_user.push(ui as u32);
                group_fit.push(*fit);
                variations.extend(bank.functions().iter().map(|tf| apply_transfer(config, tf)));
            }
            user_groups.push((start, group_user.len() as u32));
        }
        let n_groups = group_user.len();
        let radius = params.radius;

        let rows: Vec<(Vec<u32>, Vec<u64>)> = candidates
            .par_iter()
            .map(|cand| {
                let mut groups = Vec::new();
                let mut bits = Vec::new();
                let mut mask = vec![0u64; words_per_group];
                for g in 0..n_groups {
                    mask.iter_mut().for_each(|w| *w = 0);
                    let mut any = false;
                    for j in 0..n_tf {
                        if variations[g * n_tf + j].chebyshev(cand) <= radius {
                            mask[j / 64] |= 1 << (j % 64);
                            any = true;
                        }
                    }
                    if any {
                        groups.push(g as u32);
                        bits.extend_from_slice(&mask);
                    }
                }
                (groups, bits)
            })
            .collect();

        let mut row_offsets = Vec::with_capacity(candidates.len() + 1);
        let mut block_group = Vec::new();
        let mut block_bits = Vec::new();
        row_offsets.push(0);
        for (groups, bits) in rows {
            block_group.extend(groups);
            block_bits.extend(bits);
            row_offsets.push(block_group.len());
        }

        Ok(CoverageMatrix {
            n_candidates: candidates.len(),
            n_tf,
            words_per_group,
            radius,
            group_user,
            group_fit,
            user_groups,
            user_weights: dataset.users().iter().map(|u| u.weight).collect(),
            tf_weights: bank.weights().to_vec(),
            row_offsets,
            block_group,
            block_bits,
        })
    }

    /// Same coverage bits under new transfer-function weights. Bits depend
    /// only on the functions and the radius, so no recomputation is needed.
    pub fn reweighted(&self, bank: &TransferFunctionBank) -> Result<Self> {
        if bank.len() != self.n_tf {
            return Err(Error::param(format!(
                "bank has {} functions, matrix was built with {}",
                bank.len(),
                self.n_tf
            )));
        }
        let mut m = self.clone();
        m.tf_weights = bank.weights().to_vec();
        Ok(m)
    }

    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    pub fn n_variations(&self) -> usize {
        self.group_user.len() * self.n_tf
    }

    pub fn n_users(&self) -> usize {
        self.user_groups.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn variation(&self, v: usize) -> VariationRef {
        let g = v / self.n_tf;
        VariationRef {
            user: self.group_user[g] as usize,
            fit: self.group_fit[g],
            tf: v % self.n_tf,
        }
    }

    /// `w_u * cl_j` for a variation.
    pub fn variation_mass(&self, v: usize) -> f64 {
        let r = self.variation(v);
        self.user_weights[r.user] * self.tf_weights[r.tf]
    }

    fn blocks(&self, k: usize) -> impl Iterator<Item = (usize, &[u64])> + '_ {
        let w = self.words_per_group;
        (self.row_offsets[k]..self.row_offsets[k + 1])
            .map(move |b| (self.block_group[b] as usize, &self.block_bits[b * w..(b + 1) * w]))
    }

    pub fn contains(&self, k: usize, v: usize) -> bool {
        let g = v / self.n_tf;
        let j = v % self.n_tf;
        self.blocks(k)
            .find(|(bg, _)| *bg == g)
            .is_some_and(|(_, mask)| mask[j / 64] >> (j % 64) & 1 == 1)
    }

    pub fn count_ones(&self, k: usize) -> usize {
        self.blocks(k)
            .map(|(_, mask)| mask.iter().map(|w| w.count_ones() as usize).sum::<usize>())
            .sum()
    }

    /// Dense bitset view of one candidate row.
    pub fn row(&self, k: usize) -> BitSet {
        let mut set = BitSet::new(self.n_variations());
        for (g, mask) in self.blocks(k) {
            for j in iter_word_ones(mask) {
                set.insert(g * self.n_tf + j);
            }
        }
        set
    }

    /// Word buffer for [`CoverageMatrix::uncovered_mass`] /
    /// [`CoverageMatrix::add_to_union`].
    pub fn empty_union(&self) -> Vec<u64> {
        vec![0; self.group_user.len() * self.words_per_group]
    }

    /// Marks candidate `k`'s variations in `union`.
    pub fn add_to_union(&self, k: usize, union: &mut [u64]) {
        let w = self.words_per_group;
        for (g, mask) in self.blocks(k) {
            for (u, m) in union[g * w..(g + 1) * w].iter_mut().zip(mask) {
                *u |= m;
            }
        }
    }

    /// Mass `Σ w_u cl_j` of candidate `k`'s variations not yet in `union`.
    pub fn uncovered_mass(&self, k: usize, union: &[u64]) -> f64 {
        let w = self.words_per_group;
        let mut total = 0.0;
        for (g, mask) in self.blocks(k) {
            let uw = self.user_weights[self.group_user[g] as usize];
            let fresh: Vec<u64> = mask
                .iter()
                .zip(&union[g * w..(g + 1) * w])
                .map(|(m, u)| m & !u)
                .collect();
            for j in iter_word_ones(&fresh) {
                total += uw * self.tf_weights[j];
            }
        }
        total
    }

    pub fn evaluator(&self) -> CoverageEvaluator<'_> {
        let n_groups = self.group_user.len();
        CoverageEvaluator {
            matrix: self,
            bits: vec![0; n_groups * self.words_per_group],
            stamp: vec![0; n_groups],
            epoch: 0,
            touched: Vec::new(),
            group_ok: vec![false; n_groups],
            users: Vec::new(),
        }
    }
}

/// Reusable scratch space for evaluating candidate subsets against a matrix.
pub struct CoverageEvaluator<'m> {
    matrix: &'m CoverageMatrix,
    bits: Vec<u64>,
    stamp: Vec<u32>,
    epoch: u32,
    touched: Vec<u32>,
    group_ok: Vec<bool>,
    users: Vec<u32>,
}

impl CoverageEvaluator<'_> {
    /// Population coverage of the selected candidates.
    ///
    /// Per-group masses accumulate transfer-function weights in ascending
    /// function order and user weights are summed in ascending user order,
    /// which reproduces [`super::population_coverage`] bit for bit.
    pub fn coverage(&mut self, selected: &[usize], params: &CoverageParams) -> f64 {
        self.coverage_and_mass(selected, params).0
    }

    /// Population coverage together with the covered variation mass
    /// `Σ w_u cl_j` over every variation inside some selected ball.
    pub fn coverage_and_mass(&mut self, selected: &[usize], params: &CoverageParams) -> (f64, f64) {
        let m = self.matrix;
        let w = m.words_per_group;
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        let epoch = self.epoch;
        self.touched.clear();

        for &k in selected {
            for (g, mask) in m.blocks(k) {
                let slot = &mut self.bits[g * w..(g + 1) * w];
                if self.stamp[g] != epoch {
                    self.stamp[g] = epoch;
                    self.touched.push(g as u32);
                    slot.copy_from_slice(mask);
                } else {
                    for (s, b) in slot.iter_mut().zip(mask) {
                        *s |= b;
                    }
                }
            }
        }

        self.users.clear();
        let mut covered_mass = 0.0;
        for &g in &self.touched {
            let g = g as usize;
            let mut mass = 0.0;
            for j in iter_word_ones(&self.bits[g * w..(g + 1) * w]) {
                mass += m.tf_weights[j];
            }
            covered_mass += m.user_weights[m.group_user[g] as usize] * mass;
            self.group_ok[g] = params.meets_threshold(mass);
            self.users.push(m.group_user[g]);
        }
        self.users.sort_unstable();
        self.users.dedup();

        let mut total = 0.0;
        for &u in &self.users {
            let (start, end) = m.user_groups[u as usize];
            let covered = (start..end).all(|g| {
                let g = g as usize;
                self.stamp[g] == epoch && self.group_ok[g]
            });
            if covered {
                total += m.user_weights[u as usize];
            }
        }
        (total, covered_mass)
    }
}

/// Population coverage of a candidate subset via the precomputed matrix.
pub fn incremental_pc(
    matrix: &CoverageMatrix,
    selected: &[usize],
    dataset: &Dataset,
    params: &CoverageParams,
) -> Result<f64> {
    if let Some(&bad) = selected.iter().find(|&&k| k >= matrix.n_candidates) {
        return Err(Error::param(format!(
            "candidate index {bad} out of range for {} candidates",
            matrix.n_candidates
        )));
    }
    if dataset.len() != matrix.n_users() || dataset.prescription_count() != matrix.group_user.len() {
        return Err(Error::param("dataset does not match the coverage matrix"));
    }
    if (params.radius - matrix.radius).abs() > 0.0 {
        return Err(Error::param(format!(
            "matrix was built for radius {}, got {}",
            matrix.radius, params.radius
        )));
    }
    Ok(matrix.evaluator().coverage(selected, params))
}
