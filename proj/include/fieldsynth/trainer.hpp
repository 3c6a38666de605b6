#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fieldsynth/contrast.hpp"
#include "fieldsynth/error.hpp"
#include "fieldsynth/inr.hpp"
#include "fieldsynth/volume.hpp"

namespace fieldsynth::train {

using inr::LayerSet;
using inr::Mat;
using inr::Vec;

struct LossWeights {
  double mae = 1.0;
  double seg = 1.0;
  double tv = 0.1;
  double preact = 0.001;

  LossWeights scaled(double k) const { return {mae * k, seg * k, tv * k, preact * k}; }
};

struct LossBreakdown {
  double total = 0.0;
  double mae = 0.0;
  double seg = 0.0;
  double tv = 0.0;
  double preact = 0.0;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  LossWeights weights;
  AdamConfig adam;
  int iterations = 5000;
  // Patch edge on the high-resolution lattice; must be a multiple of df.
  int patch_size = 16;
  int batch_patches = 4;
  std::uint64_t seed = 0;
  // Extra stream selector for patch sampling; lets repeated runs with one
  // seed differ only in patch order.
  std::uint64_t run = 0;
  // Differentiable part of the forward model.
  double sigma_smooth = 0.5;
  int df = 2;
  inr::NetworkShape shape{};
  inr::EmbeddingConfig embedding{};
  inr::GaborParams gabor{};
  inr::InitScheme init{};

  void validate() const;
};

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  LayerSet<T> m;
  LayerSet<T> v;
};

template <typename T>
AdamState<T> make_adam_state(const inr::InrParams<T>& params);

// One bias-corrected Adam update on flat buffers; `step` is the 1-based
// index of this update.
template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
                 std::uint64_t step, const AdamConfig& config);

template <typename T>
void adam_step(AdamState<T>& state, inr::InrParams<T>& params, const LayerSet<T>& grads, const AdamConfig& config);

// Uniform patch origins with every valid origin equally likely.
std::vector<std::array<int, 3>> sample_patches(Dims dims, int patch_size, int count, std::uint64_t seed);

// Everything one optimization step needs, precomputed from the observed
// data and a set of patch origins (in observed-grid voxels).
template <typename T>
struct StepBatch {
  int df = 2;
  int core = 16;  // high-resolution patch edge
  int halo = 0;   // smoothing radius
  std::vector<double> kernel;
  std::array<double, 3> m{1.0, 1.0, 1.0};
  int num_patches = 0;
  Mat<T> features;                    // embedding of every padded coordinate
  std::vector<T> observed;            // observed values, patch-major
  std::vector<std::uint8_t> labels;   // observed labels, patch-major

  int padded() const { return core + 2 * halo; }
  int pooled() const { return core / df; }
};

template <typename T>
StepBatch<T> make_step_batch(const Volume& observed, const Segmentation& observed_seg, const DegradationVector& m,
                             const TrainConfig& config, std::span<const double> frequencies,
                             std::span<const std::array<int, 3>> origins);

// Loss of a step and, when grads is non-null, its exact gradient with respect
// to every network parameter. Throws NumericalError on a non-finite loss.
// When kinks is non-null it receives the sign of every argument at which the
// loss is not differentiable (ReLU inputs, MAE residuals, TV differences);
// the loss is smooth between two parameter points with equal patterns.
template <typename T>
LossBreakdown loss_and_gradients(const inr::InrParams<T>& params, const StepBatch<T>& batch,
                                 const LossWeights& weights, LayerSet<T>* grads,
                                 std::vector<std::int8_t>* kinks = nullptr);

template <typename T>
struct TrainResult {
  inr::InrParams<T> params;
  std::vector<LossBreakdown> history;
};

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::vector<LossBreakdown> history)
      : NumericalError(what), history_(std::move(history)) {}
  const std::vector<LossBreakdown>& history() const { return history_; }

 private:
  std::vector<LossBreakdown> history_;
};

using ProgressFn = std::function<void(int iteration, const LossBreakdown&)>;

// Fits the network to an observed ULF volume and its segmentation. The
// prediction lives on a lattice df times finer than the observation.
template <typename T>
TrainResult<T> train(const Volume& observed, const Segmentation& observed_seg, const DegradationVector& m,
                     const TrainConfig& config, const ProgressFn& progress = {});

}  // namespace fieldsynth::train
