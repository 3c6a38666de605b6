#include "fieldsynth/pipeline.hpp"

#include "fieldsynth/error.hpp"
#include "fieldsynth/resample.hpp"

namespace fieldsynth::pipeline {

Volume trilinear_baseline(const Volume& ulf, int df) {
  if (df < 1) throw ArgumentError("upsampling factor must be >= 1");
  return clamp_intensity(resample(ulf, static_cast<double>(df), Interpolation::Trilinear), 0.0f, 1.0f);
}

Segmentation nearest_labels(const Segmentation& seg, int df) {
  if (df < 1) throw ArgumentError("upsampling factor must be >= 1");
  const Volume up = resample(seg.hardened().label_volume(), static_cast<double>(df), Interpolation::Nearest);
  return Segmentation::from_label_volume(up);
}

Synthesis synthesize_hf(const Volume& ulf, const Segmentation& ulf_seg, const DegradationVector& m,
                        const train::TrainConfig& config, const train::ProgressFn& progress) {
  auto fit = train::train<float>(ulf, ulf_seg, m, config, progress);
  const Dims d = ulf.dims();
  const Dims hf{d.nx * config.df, d.ny * config.df, d.nz * config.df};
  auto grid = inr::predict_grid(fit.params, hf);
  // Borrow the geometry of a plain resampling so voxel centres line up.
  const Volume geometry = resample(ulf, static_cast<double>(config.df), Interpolation::Nearest);
  Volume intensity = clamp_intensity(grid.intensity, 0.0f, 1.0f).with_geometry(geometry.spacing(), geometry.affine());
  return {std::move(fit.params), std::move(fit.history), std::move(intensity), std::move(grid.segmentation)};
}

metrics::MetricReport ulf_space_report(const Synthesis& synthesis, const Volume& ulf, const Segmentation& ulf_seg,
                                       const DegradationVector& m, const ForwardConfig& forward,
                                       const metrics::EvaluateOptions& options) {
  const Segmentation hard = synthesis.segmentation.hardened();
  const Volume degraded = clamp_intensity(simulate_ulf_clean(synthesis.intensity, hard, m, forward), 0.0f, 1.0f);
  const Segmentation pooled = downsample_labels(hard, forward.df);
  metrics::MetricReport report;
  report.ssim = metrics::ssim(degraded, ulf);
  report.mslc = metrics::mslc(degraded, ulf);
  report.wm_gm_contrast = metrics::wm_gm_contrast(degraded, ulf_seg);
  report.overlap = metrics::dice_iou(pooled, ulf_seg);
  const auto mean = metrics::mean_tissue_overlap(*report.overlap);
  report.rqs = metrics::rqs(report.ssim, report.mslc, mean.dice, mean.iou, options.rqs_weights);
  return report;
}

PhantomSpec ExperimentConfig::default_phantom() {
  PhantomSpec spec;
  spec.background_noise = 0.01;
  return spec;
}

ContrastTriple sweep_target(double c_wg) {
  const double c_gc = 15.0 + (c_wg - 5.0) * 40.0 / 15.0;
  return {c_wg + c_gc, c_wg, c_gc};
}

ExperimentResult run_experiment(const ExperimentConfig& config, const train::ProgressFn& progress,
                                const metrics::EvaluateOptions& options) {
  config.forward.validate();
  ExperimentResult r;
  r.phantom = make_phantom(config.phantom, config.phantom_seed);
  r.snr = estimate_snr(r.phantom.volume, RoiMasks::from_segmentation(r.phantom.segmentation));
  r.solution = estimate_m(r.snr, config.target, config.solver);
  r.ulf = simulate_ulf(r.phantom.volume, r.phantom.segmentation, r.solution.m, config.forward);
  r.ulf_seg = downsample_labels(r.phantom.segmentation, config.forward.df);

  train::TrainConfig tc = config.train;
  tc.sigma_smooth = config.forward.sigma_smooth;
  tc.df = config.forward.df;
  r.synthesis = synthesize_hf(r.ulf, r.ulf_seg, r.solution.m, tc, progress);
  r.baseline = trilinear_baseline(r.ulf, tc.df);

  const Volume& truth = r.phantom.volume;
  if (r.synthesis.intensity.dims() != truth.dims())
    throw ArgumentError("phantom dims must be divisible by the downsampling factor");
  r.prediction = metrics::evaluate(r.synthesis.intensity, truth, &r.synthesis.segmentation,
                                   &r.phantom.segmentation, options);
  const Segmentation baseline_seg = nearest_labels(r.ulf_seg, tc.df);
  r.trilinear = metrics::evaluate(r.baseline, truth, &baseline_seg, &r.phantom.segmentation, options);
  return r;
}

}  // namespace fieldsynth::pipeline
