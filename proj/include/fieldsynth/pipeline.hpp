#pragma once

#include <cstdint>
#include <vector>

#include "fieldsynth/contrast.hpp"
#include "fieldsynth/forward_model.hpp"
#include "fieldsynth/inr.hpp"
#include "fieldsynth/metrics.hpp"
#include "fieldsynth/phantom.hpp"
#include "fieldsynth/trainer.hpp"
#include "fieldsynth/volume.hpp"

namespace fieldsynth::pipeline {

struct Synthesis {
  inr::InrParams<float> params;
  std::vector<train::LossBreakdown> history;
  Volume intensity;           // df times finer than the input
  Segmentation segmentation;  // soft, same grid
};

// Fits the network to a ULF volume and samples it on the upsampled grid.
// The output carries the geometry of a factor-df resampling of the input.
Synthesis synthesize_hf(const Volume& ulf, const Segmentation& ulf_seg, const DegradationVector& m,
                        const train::TrainConfig& config, const train::ProgressFn& progress = {});

// Trilinear upsampling by df, clamped to [0,1].
Volume trilinear_baseline(const Volume& ulf, int df);
// Nearest-neighbour upsampling of labels.
Segmentation nearest_labels(const Segmentation& seg, int df);

// Scores a synthesis without high-field ground truth: the prediction is
// degraded back through the noise-free forward model and compared with the
// observation.
metrics::MetricReport ulf_space_report(const Synthesis& synthesis, const Volume& ulf, const Segmentation& ulf_seg,
                                       const DegradationVector& m, const ForwardConfig& forward,
                                       const metrics::EvaluateOptions& options = {});

struct ExperimentConfig {
  PhantomSpec phantom = default_phantom();
  std::uint64_t phantom_seed = 0;
  ContrastTriple target{2.0, 12.0, 17.0};
  SolverConfig solver{};
  // sigma_smooth and df here override the copies in `train`.
  ForwardConfig forward{};
  train::TrainConfig train{};

  // Default phantom with background noise, so SNR is defined.
  static PhantomSpec default_phantom();
};

struct ExperimentResult {
  Phantom phantom;
  SnrTriple snr;
  SolverResult solution;
  Volume ulf;
  Segmentation ulf_seg;
  Synthesis synthesis;
  Volume baseline;
  metrics::MetricReport prediction;
  metrics::MetricReport trilinear;
};

// Full target for a WM-GM sweep value: c_gc runs linearly from 15 at
// c_wg = 5 to 55 at c_wg = 20, and c_wc = c_wg + c_gc.
ContrastTriple sweep_target(double c_wg);

// phantom -> SNR -> m -> simulated ULF -> synthesis, scored against the
// phantom next to the trilinear baseline.
ExperimentResult run_experiment(const ExperimentConfig& config, const train::ProgressFn& progress = {},
                                const metrics::EvaluateOptions& options = {});

}  // namespace fieldsynth::pipeline
