#include "fieldsynth/trainer.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "fieldsynth/forward_model.hpp"
#include "fieldsynth/losses.hpp"
#include "fieldsynth/rng.hpp"

namespace fieldsynth::train {

void TrainConfig::validate() const {
  for (double w : {weights.mae, weights.seg, weights.tv, weights.preact})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ArgumentError("loss weights must be finite and >= 0");
  if (!(adam.lr > 0.0)) throw ArgumentError("learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ArgumentError("Adam betas must lie in [0,1)");
  if (!(adam.eps > 0.0)) throw ArgumentError("Adam eps must be positive");
  if (iterations < 1) throw ArgumentError("iterations must be >= 1");
  if (df < 1) throw ArgumentError("df must be >= 1");
  if (patch_size < df || patch_size % df != 0) throw ArgumentError("patch_size must be a positive multiple of df");
  if (batch_patches < 1) throw ArgumentError("batch_patches must be >= 1");
  if (!(sigma_smooth >= 0.0)) throw ArgumentError("sigma_smooth must be >= 0");
  embedding.validate();
}

template <typename T>
AdamState<T> make_adam_state(const inr::InrParams<T>& params) {
  return {0, inr::zeros_like(params.layers), inr::zeros_like(params.layers)};
}

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::span<T> m, std::span<T> v,
                 std::uint64_t step, const AdamConfig& config) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size())
    throw ArgumentError("Adam buffers differ in size");
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(config.lr), eps = static_cast<T>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grads[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grads[i] * grads[i];
    const T mhat = m[i] / c1;
    const T vhat = v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

template <typename T>
void adam_step(AdamState<T>& state, inr::InrParams<T>& params, const LayerSet<T>& grads, const AdamConfig& config) {
  if (grads.size() != params.layers.size() || state.m.size() != params.layers.size())
    throw ArgumentError("gradient and parameter shapes disagree");
  ++state.step;
  auto as_span = [](auto& x) { return std::span<T>(x.data(), static_cast<std::size_t>(x.size())); };
  auto as_cspan = [](const auto& x) { return std::span<const T>(x.data(), static_cast<std::size_t>(x.size())); };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    adam_update<T>(as_span(p.weight), as_cspan(grads[l].weight), as_span(state.m[l].weight),
                   as_span(state.v[l].weight), state.step, config);
    adam_update<T>(as_span(p.bias), as_cspan(grads[l].bias), as_span(state.m[l].bias), as_span(state.v[l].bias),
                   state.step, config);
  }
}

std::vector<std::array<int, 3>> sample_patches(Dims dims, int patch_size, int count, std::uint64_t seed) {
  if (patch_size < 1) throw ArgumentError("patch size must be >= 1");
  if (patch_size > dims.nx || patch_size > dims.ny || patch_size > dims.nz)
    throw ArgumentError("patch of " + std::to_string(patch_size) + " voxels does not fit the volume");
  if (count < 0) throw ArgumentError("patch count must be >= 0");
  SeqRng rng(hash_combine(seed, 0x7061746368ULL));
  std::vector<std::array<int, 3>> origins(static_cast<std::size_t>(count));
  for (auto& o : origins)
    for (int a = 0; a < 3; ++a)
      o[a] = static_cast<int>(rng.below(static_cast<std::uint64_t>(dims[a] - patch_size + 1)));
  return origins;
}

namespace {

std::size_t axis_stride(const Dims& d, int axis) {
  return axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(d.nx) : static_cast<std::size_t>(d.nx) * d.ny);
}

Dims shrink(Dims d, int axis, int by) {
  if (axis == 0) d.nx -= by;
  else if (axis == 1) d.ny -= by;
  else d.nz -= by;
  return d;
}

// "Valid" correlation along one axis: output extent is input extent minus
// kernel width plus one.
template <typename T>
std::vector<T> conv_valid(const std::vector<T>& in, const Dims& din, int axis, const std::vector<double>& kernel) {
  const int taps = static_cast<int>(kernel.size());
  const Dims dout = shrink(din, axis, taps - 1);
  const std::size_t sin = axis_stride(din, axis);
  std::vector<T> out(dout.count());
  for (int z = 0; z < dout.nz; ++z)
    for (int y = 0; y < dout.ny; ++y)
      for (int x = 0; x < dout.nx; ++x) {
        const std::size_t base = din.index(x, y, z);
        T acc = 0;
        for (int k = 0; k < taps; ++k) acc += static_cast<T>(kernel[k]) * in[base + k * sin];
        out[dout.index(x, y, z)] = acc;
      }
  return out;
}

template <typename T>
std::vector<T> conv_valid_adjoint(const std::vector<T>& dout_values, const Dims& din, int axis,
                                  const std::vector<double>& kernel) {
  const int taps = static_cast<int>(kernel.size());
  const Dims dout = shrink(din, axis, taps - 1);
  const std::size_t sin = axis_stride(din, axis);
  std::vector<T> grad(din.count(), T(0));
  for (int z = 0; z < dout.nz; ++z)
    for (int y = 0; y < dout.ny; ++y)
      for (int x = 0; x < dout.nx; ++x) {
        const T g = dout_values[dout.index(x, y, z)];
        const std::size_t base = din.index(x, y, z);
        for (int k = 0; k < taps; ++k) grad[base + k * sin] += static_cast<T>(kernel[k]) * g;
      }
  return grad;
}

}  // namespace

template <typename T>
StepBatch<T> make_step_batch(const Volume& observed, const Segmentation& observed_seg, const DegradationVector& m,
                             const TrainConfig& config, std::span<const double> frequencies,
                             std::span<const std::array<int, 3>> origins) {
  if (observed_seg.dims() != observed.dims()) throw ArgumentError("observed segmentation is not aligned");
  StepBatch<T> b;
  b.df = config.df;
  b.core = config.patch_size;
  b.kernel = gaussian_kernel(config.sigma_smooth);
  b.halo = static_cast<int>(b.kernel.size() / 2);
  b.m = m.as_array();
  b.num_patches = static_cast<int>(origins.size());
  const Dims nu = observed.dims();
  const Dims nh{nu.nx * b.df, nu.ny * b.df, nu.nz * b.df};
  const int P = b.padded();
  const int pu = b.pooled();
  const std::size_t per_patch = static_cast<std::size_t>(P) * P * P;

  Mat<T> coords(3, static_cast<Eigen::Index>(per_patch * origins.size()));
  b.observed.reserve(static_cast<std::size_t>(pu) * pu * pu * origins.size());
  b.labels.reserve(b.observed.capacity());
  Eigen::Index col = 0;
  for (const auto& o : origins) {
    for (int a = 0; a < 3; ++a)
      if (o[a] < 0 || o[a] + pu > nu[a]) throw ArgumentError("patch origin outside the observed volume");
    for (int c = 0; c < P; ++c)
      for (int bb = 0; bb < P; ++bb)
        for (int a = 0; a < P; ++a, ++col) {
          const int hx = reflect_index(o[0] * b.df - b.halo + a, nh.nx);
          const int hy = reflect_index(o[1] * b.df - b.halo + bb, nh.ny);
          const int hz = reflect_index(o[2] * b.df - b.halo + c, nh.nz);
          coords(0, col) = static_cast<T>(inr::grid_coordinate(hx, nh.nx));
          coords(1, col) = static_cast<T>(inr::grid_coordinate(hy, nh.ny));
          coords(2, col) = static_cast<T>(inr::grid_coordinate(hz, nh.nz));
        }
    for (int k = 0; k < pu; ++k)
      for (int j = 0; j < pu; ++j)
        for (int i = 0; i < pu; ++i) {
          const std::size_t v = nu.index(o[0] + i, o[1] + j, o[2] + k);
          b.observed.push_back(static_cast<T>(observed[v]));
          b.labels.push_back(observed_seg.label(v));
        }
  }
  b.features = inr::fourier_embed<T>(coords, frequencies);
  return b;
}

template <typename T>
LossBreakdown loss_and_gradients(const inr::InrParams<T>& params, const StepBatch<T>& batch,
                                 const LossWeights& weights, LayerSet<T>* grads, std::vector<std::int8_t>* kinks) {
  const bool want_grad = grads != nullptr;
  inr::ForwardTrace<T> trace;
  if (want_grad) {
    trace = inr::forward_trace(params, batch.features);
  } else {
    trace.output = inr::forward(params, batch.features);
  }
  const auto& out = trace.output;
  const Eigen::Index total = out.pre.cols();

  const int P = batch.padded();
  const int core = batch.core;
  const int df = batch.df;
  const int pu = batch.pooled();
  const int halo = batch.halo;
  const Dims dpad{P, P, P};
  const Dims dcore{core, core, core};
  const Dims dpool{pu, pu, pu};
  const std::size_t per_pad = dpad.count();
  const std::size_t per_pool = dpool.count();
  const T m0 = static_cast<T>(batch.m[0]), m1 = static_cast<T>(batch.m[1]), m2 = static_cast<T>(batch.m[2]);
  const T inv_block = T(1) / static_cast<T>(df * df * df);

  auto core_index = [&](int x, int y, int z) { return dpad.index(x + halo, y + halo, z + halo); };

  // Forward through the differentiable observation model, per patch.
  std::vector<T> pred(per_pool * static_cast<std::size_t>(batch.num_patches));
  Mat<T> pooled_probs(kNumClasses, static_cast<Eigen::Index>(pred.size()));
  std::vector<std::vector<T>> recon(static_cast<std::size_t>(batch.num_patches));
  for (int p = 0; p < batch.num_patches; ++p) {
    const std::size_t off = per_pad * static_cast<std::size_t>(p);
    std::vector<T> q(per_pad);
    for (std::size_t v = 0; v < per_pad; ++v) {
      const auto c = static_cast<Eigen::Index>(off + v);
      q[v] = out.intensity(c) * (m0 * out.probs(1, c) + m1 * out.probs(2, c) + m2 * out.probs(3, c));
    }
    Dims d = dpad;
    for (int axis = 0; axis < 3; ++axis) {
      q = conv_valid(q, d, axis, batch.kernel);
      d = shrink(d, axis, 2 * halo);
    }
    auto& rec = recon[static_cast<std::size_t>(p)];
    rec.resize(dcore.count());
    for (int z = 0; z < core; ++z)
      for (int y = 0; y < core; ++y)
        for (int x = 0; x < core; ++x) {
          const auto c = static_cast<Eigen::Index>(off + core_index(x, y, z));
          rec[dcore.index(x, y, z)] = out.intensity(c) * (out.probs(1, c) + out.probs(2, c) + out.probs(3, c));
        }
    for (int k = 0; k < pu; ++k)
      for (int j = 0; j < pu; ++j)
        for (int i = 0; i < pu; ++i) {
          T acc = 0;
          T pacc[kNumClasses] = {0, 0, 0, 0};
          for (int z = k * df; z < (k + 1) * df; ++z)
            for (int y = j * df; y < (j + 1) * df; ++y)
              for (int x = i * df; x < (i + 1) * df; ++x) {
                acc += q[dcore.index(x, y, z)];
                const auto c = static_cast<Eigen::Index>(off + core_index(x, y, z));
                for (int cl = 0; cl < kNumClasses; ++cl) pacc[cl] += out.probs(cl, c);
              }
          const std::size_t u = per_pool * static_cast<std::size_t>(p) + dpool.index(i, j, k);
          pred[u] = acc * inv_block;
          for (int cl = 0; cl < kNumClasses; ++cl)
            pooled_probs(cl, static_cast<Eigen::Index>(u)) = pacc[cl] * inv_block;
        }
  }

  if (kinks) {
    auto sign = [](T v) { return static_cast<std::int8_t>((v > T(0)) - (v < T(0))); };
    kinks->clear();
    for (Eigen::Index c = 0; c < total; ++c) kinks->push_back(sign(out.pre(0, c)));
    for (std::size_t u = 0; u < pred.size(); ++u) kinks->push_back(sign(pred[u] - batch.observed[u]));
    for (const auto& rec : recon)
      for (int axis = 0; axis < 3; ++axis) {
        const std::size_t stride = axis_stride(dcore, axis);
        for (int z = 0; z < core; ++z)
          for (int y = 0; y < core; ++y)
            for (int x = 0; x < core; ++x) {
              if ((axis == 0 ? x : axis == 1 ? y : z) + 1 >= core) continue;
              const std::size_t i = dcore.index(x, y, z);
              kinks->push_back(sign(rec[i + stride] - rec[i]));
            }
      }
  }

  std::vector<T> d_pred(want_grad ? pred.size() : 0, T(0));
  Mat<T> d_pooled;
  if (want_grad) d_pooled = Mat<T>::Zero(kNumClasses, static_cast<Eigen::Index>(pred.size()));
  std::vector<std::vector<T>> d_recon(static_cast<std::size_t>(batch.num_patches));

  LossBreakdown lb;
  lb.mae = static_cast<double>(
      loss_mae<T>(pred, batch.observed, d_pred, static_cast<T>(weights.mae)));
  lb.seg = loss_seg<T>(pooled_probs, batch.labels, want_grad ? &d_pooled : nullptr, static_cast<T>(weights.seg))
               .total();
  const T tv_scale = static_cast<T>(weights.tv) / static_cast<T>(batch.num_patches);
  double tv_sum = 0.0;
  for (int p = 0; p < batch.num_patches; ++p) {
    auto& g = d_recon[static_cast<std::size_t>(p)];
    if (want_grad) g.assign(dcore.count(), T(0));
    tv_sum += static_cast<double>(loss_tv<T>(recon[static_cast<std::size_t>(p)], dcore, g, tv_scale));
  }
  lb.tv = tv_sum / batch.num_patches;
  Mat<T> d_pre;
  if (want_grad) d_pre = Mat<T>::Zero(5, total);
  lb.preact = static_cast<double>(loss_preact<T>(out.pre, want_grad ? &d_pre : nullptr, static_cast<T>(weights.preact)));
  lb.total = weights.mae * lb.mae + weights.seg * lb.seg + weights.tv * lb.tv + weights.preact * lb.preact;

  if (!std::isfinite(lb.total)) {
    std::ostringstream msg;
    msg << "non-finite loss (mae=" << lb.mae << ", seg=" << lb.seg << ", tv=" << lb.tv << ", preact=" << lb.preact
        << ")";
    throw NumericalError(msg.str());
  }
  if (!want_grad) return lb;

  // Reverse through the observation model.
  Vec<T> d_int = Vec<T>::Zero(total);
  Mat<T> d_probs = Mat<T>::Zero(kNumClasses, total);
  for (int p = 0; p < batch.num_patches; ++p) {
    const std::size_t off = per_pad * static_cast<std::size_t>(p);
    std::vector<T> dq(dcore.count());
    for (int z = 0; z < core; ++z)
      for (int y = 0; y < core; ++y)
        for (int x = 0; x < core; ++x) {
          const std::size_t u = per_pool * static_cast<std::size_t>(p) + dpool.index(x / df, y / df, z / df);
          dq[dcore.index(x, y, z)] = d_pred[u] * inv_block;
          const auto c = static_cast<Eigen::Index>(off + core_index(x, y, z));
          for (int cl = 0; cl < kNumClasses; ++cl)
            d_probs(cl, c) += d_pooled(cl, static_cast<Eigen::Index>(u)) * inv_block;
          const T gr = d_recon[static_cast<std::size_t>(p)][dcore.index(x, y, z)];
          d_int(c) += gr * (out.probs(1, c) + out.probs(2, c) + out.probs(3, c));
          for (int cl = 1; cl < kNumClasses; ++cl) d_probs(cl, c) += gr * out.intensity(c);
        }
    // Axes were reduced x, y, z; undo in reverse order.
    std::array<Dims, 4> shapes{dpad, shrink(dpad, 0, 2 * halo), shrink(shrink(dpad, 0, 2 * halo), 1, 2 * halo), dcore};
    for (int axis = 2; axis >= 0; --axis) dq = conv_valid_adjoint(dq, shapes[static_cast<std::size_t>(axis)], axis, batch.kernel);
    for (std::size_t v = 0; v < per_pad; ++v) {
      const auto c = static_cast<Eigen::Index>(off + v);
      const T g = dq[v];
      d_int(c) += g * (m0 * out.probs(1, c) + m1 * out.probs(2, c) + m2 * out.probs(3, c));
      d_probs(1, c) += g * out.intensity(c) * m0;
      d_probs(2, c) += g * out.intensity(c) * m1;
      d_probs(3, c) += g * out.intensity(c) * m2;
    }
  }
  d_pre += inr::heads_backward(out, d_int, d_probs);
  *grads = inr::backward(params, trace, d_pre);
  return lb;
}

template <typename T>
TrainResult<T> train(const Volume& observed, const Segmentation& observed_seg, const DegradationVector& m,
                     const TrainConfig& config_in, const ProgressFn& progress) {
  TrainConfig config = config_in;
  config.shape.input_width = config.embedding.width();
  config.validate();
  m.validate();
  if (observed_seg.dims() != observed.dims()) throw ArgumentError("observed segmentation is not aligned");
  const int pu = config.patch_size / config.df;
  const Dims nu = observed.dims();
  if (pu > nu.nx || pu > nu.ny || pu > nu.nz)
    throw ArgumentError("patch of " + std::to_string(config.patch_size) +
                        " high-resolution voxels does not fit the observed volume");

  TrainResult<T> result;
  result.params = inr::init_params<T>(config.shape, config.embedding, config.gabor, config.seed, config.init);
  auto state = make_adam_state(result.params);
  const std::uint64_t stream = hash_combine(hash_combine(config.seed, 0x73616d706c65ULL), config.run);
  LayerSet<T> grads;
  result.history.reserve(static_cast<std::size_t>(config.iterations));
  for (int it = 0; it < config.iterations; ++it) {
    const auto origins = sample_patches(nu, pu, config.batch_patches, hash_combine(stream, static_cast<std::uint64_t>(it)));
    const auto batch = make_step_batch<T>(observed, observed_seg, m, config, result.params.frequencies, origins);
    LossBreakdown lb;
    try {
      lb = loss_and_gradients(result.params, batch, config.weights, &grads);
    } catch (const NumericalError& e) {
      throw TrainingDiverged("training diverged at iteration " + std::to_string(it) + ": " + e.what(),
                             std::move(result.history));
    }
    result.history.push_back(lb);
    if (progress) progress(it, lb);
    adam_step(state, result.params, grads, config.adam);
  }
  return result;
}

#define FIELDSYNTH_INSTANTIATE(T)                                                                               \
  template AdamState<T> make_adam_state(const inr::InrParams<T>&);                                              \
  template void adam_update(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, std::uint64_t,        \
                            const AdamConfig&);                                                                 \
  template void adam_step(AdamState<T>&, inr::InrParams<T>&, const LayerSet<T>&, const AdamConfig&);           \
  template StepBatch<T> make_step_batch(const Volume&, const Segmentation&, const DegradationVector&,          \
                                        const TrainConfig&, std::span<const double>,                            \
                                        std::span<const std::array<int, 3>>);                                   \
  template LossBreakdown loss_and_gradients(const inr::InrParams<T>&, const StepBatch<T>&, const LossWeights&, \
                                            LayerSet<T>*, std::vector<std::int8_t>*);                                                      \
  template TrainResult<T> train(const Volume&, const Segmentation&, const DegradationVector&,                  \
                                const TrainConfig&, const ProgressFn&);

FIELDSYNTH_INSTANTIATE(float)
FIELDSYNTH_INSTANTIATE(double)

#undef FIELDSYNTH_INSTANTIATE

}  // namespace fieldsynth::train
