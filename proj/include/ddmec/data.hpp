#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddmec/diffusion.hpp"
#include "ddmec/numkit.hpp"

namespace ddmec {

// n x d real samples plus optional integer label columns.
struct TabularDataset {
    Tensor points;
    std::optional<std::vector<int>> labels;
    std::optional<std::vector<int>> sublabels;
    std::string name;

    std::size_t size() const { return points.rows(); }
    std::size_t dim() const { return points.cols(); }
};

// CSV with a header row; numeric feature columns, optional trailing "label"
// and "sublabel" integer columns. Ragged rows, non-numeric features and
// non-finite values are errors reported with their row number.
TabularDataset load_csv(const std::string& path);

// Writes a dataset in the same format (17 significant digits, re-ingestible).
void save_csv(const std::string& path, const TabularDataset& data);

// Per-feature standardization with outlier clamping: apply() maps to zero
// mean / unit variance and clamps to +-clip_sigmas; invert() undoes the
// affine map (identity within 1e-10 for in-range points).
struct Normalizer {
    Tensor mean;  // 1 x d
    Tensor std;   // 1 x d, entries > 0
    double clip_sigmas = 5.0;

    static Normalizer fit(const Tensor& data, double clip_sigmas = 5.0);
    static Normalizer identity(std::size_t dim);

    std::size_t dim() const { return mean.cols(); }
    Tensor apply(const Tensor& rows) const;
    Tensor invert(const Tensor& rows) const;
};

// Synthetic coupled-dataset generators with known ground truth. The same
// spec and seed always produce bitwise-identical outputs.
//   gmm_rotate:   X from a C-component 2D GMM (centers on a circle, component
//                 sigma <= separation/6), Y = R(angle) X + noise.
//   linear_map:   X coordinates drawn from per-coordinate asymmetric
//                 two-component 1D mixtures (parameters vary per coordinate,
//                 which makes the map identifiable), Y = W X + noise with W
//                 block-diagonal 2D rotations derived from angle_deg.
//   checkerboard: X uniform on the black cells of a 4x4 board over [-2,2]^2,
//                 Y = R(angle) X + noise.
struct SyntheticSpec {
    std::string generator = "gmm_rotate";
    std::size_t dims = 2;
    int components = 2;
    double noise = 0.1;
    double angle_deg = 90.0;
    std::size_t n = 5000;
    std::uint64_t seed = 0;
};

// Y rows are shuffled relative to X; correspondence[i] is the Y row matching
// X row i and is meant for evaluation only.
struct SynthResult {
    TabularDataset x;
    TabularDataset y;
    std::vector<std::size_t> correspondence;
};

SynthResult synth_coupled(const SyntheticSpec& spec);

// The linear_map generator's matrix (d x d), exposed for evaluation.
Tensor linear_map_matrix(std::size_t dims, double angle_deg);

// ---------------------------------------------------------------------------
// Checkpoints.
//
// Wire format: 5-byte magic "DMEC1", 1 version byte, u32 little-endian
// metadata length, UTF-8 JSON metadata, then raw little-endian float64
// blocks in metadata-declared order (params, then EMA blocks, then Adam
// m/v blocks when present). Round-trips are bitwise.
// ---------------------------------------------------------------------------

struct CheckpointAdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

struct Checkpoint {
    std::string kind;        // "unconditional" | "conditional"
    std::string data_role;   // "x" | "y"
    std::string cond_role;   // "" for unconditional
    DenoiserConfig config;
    int T = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    double ema_decay = 0.999;
    std::uint64_t steps_trained = 0;
    std::optional<Normalizer> data_norm;
    std::optional<Normalizer> cond_norm;
    std::vector<std::pair<std::string, Tensor>> params;
    std::optional<std::vector<Tensor>> ema;
    std::optional<CheckpointAdamState> adam;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Glue between checkpoints and live models.
Checkpoint checkpoint_from_model(const DiffusionModel& model, double beta_min, double beta_max,
                                 const std::string& data_role, const std::string& cond_role,
                                 const std::optional<Normalizer>& data_norm,
                                 const std::optional<Normalizer>& cond_norm);
DiffusionModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ddmec
