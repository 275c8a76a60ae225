#pragma once

#include <string>
#include <vector>

#include "ddmec/data.hpp"
#include "ddmec/mec.hpp"
#include "ddmec/numkit.hpp"

namespace ddmec {

// Points with class/subclass labels; alias of the dataset carrier.
using LabeledEmbedding = TabularDataset;

// Two aligned point sets; correspondence[i] is the target row matching
// source row i (a bijection).
struct PairedEval {
    Tensor source;
    Tensor target;
    std::vector<std::size_t> correspondence;
};

// Fraction of samples closer than the true match, averaged over points and
// symmetrized over both directions. 0 = perfect, 0.5 = random.
double foscttm(const PairedEval& eval);

// k-NN majority-vote label transfer from source to target (both labeled, in
// a shared space); ties break toward the smallest label id.
double label_transfer_accuracy(const LabeledEmbedding& source, const LabeledEmbedding& target,
                               int k);

// Fraction of generated points whose k-NN majority label among reference
// points equals the point's own true label.
double neighborhood_type_accuracy(const Tensor& generated, const LabeledEmbedding& reference,
                                  const std::vector<int>& true_labels, int k = 5);

// Replaces each row by the nearest dataset row (Euclidean; ties toward the
// lower index). Idempotent.
Tensor nn_project(const Tensor& generated, const Tensor& dataset);

// ---------------------------------------------------------------------------
// Entropy / mutual-information estimates for a learned coupling.
// ---------------------------------------------------------------------------

struct CouplingEntropy {
    double conditional_entropy = 0.0;  // H(X|Y) estimate, nats up to shared const
    double conditional_stderr = 0.0;
    double joint_entropy = 0.0;        // conditional + conditioning-marginal estimate
    double joint_stderr = 0.0;
    double mutual_information = 0.0;   // marginal sum minus joint (constant-free)
    double mi_stderr = 0.0;
    std::string note;
};

// Samples x ~ p_theta(.|y) for each cond_data row, then combines conditional
// NLL estimates with anchor-based marginal entropy estimates. k_mc draws per
// estimate; likelihood weighting so differences are calibrated nats.
CouplingEntropy estimate_coupling_entropy(CouplingPair& pair, const Tensor& cond_data, int k_mc,
                                          const SampleConfig& sample_cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Discrete MEC oracle (desk scale, m*n <= 25).
// ---------------------------------------------------------------------------

struct DiscreteMarginals {
    std::vector<double> p_x;
    std::vector<double> p_y;
    void validate() const;  // entries >= 0, sums within 1e-12 of 1
};

struct MecOracleResult {
    Tensor coupling;  // m x n, marginals match inputs within tol
    double entropy = 0.0;
};

double shannon_entropy(const std::vector<double>& p);

// Minimum-entropy coupling by exhaustive vertex enumeration (spanning-tree
// bases of the transport polytope) plus multi-start sharpened projected
// descent and greedy initializations; entropy is concave so the optimum is a
// vertex and enumeration is exact at these sizes.
MecOracleResult discrete_mec_oracle(const DiscreteMarginals& marginals, double tol = 1e-9,
                                    int n_starts = 64, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Quantized-coupling helpers for the oracle-gap evaluation.
// ---------------------------------------------------------------------------

// Assigns each point to one of `cells` bins (power of two) by splitting the
// first log2(cells) coordinates at their medians.
std::vector<int> quantize_median_grid(const Tensor& points, int cells);

struct QuantizedCoupling {
    std::vector<double> p_x;
    std::vector<double> p_y;
    Tensor joint;  // cells x cells empirical joint
    double joint_entropy = 0.0;
};

QuantizedCoupling empirical_quantized_coupling(const Tensor& x_points, const Tensor& y_points,
                                               int cells);

}  // namespace ddmec
