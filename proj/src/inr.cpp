#include "fieldsynth/inr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>

#include "fieldsynth/error.hpp"
#include "fieldsynth/rng.hpp"

namespace fieldsynth::inr {

std::vector<double> EmbeddingConfig::frequencies() const {
  validate();
  std::vector<double> f(static_cast<std::size_t>(num_frequencies));
  if (mode == EmbeddingMode::LogLinear) {
    for (int k = 0; k < num_frequencies; ++k) f[k] = base_scale * std::ldexp(1.0, k);
  } else {
    SeqRng rng(hash_combine(seed, 0x666f7572696572ULL));
    for (auto& v : f) v = std::abs(base_scale * rng.normal());
  }
  return f;
}

void EmbeddingConfig::validate() const {
  if (num_frequencies < 0) throw ArgumentError("num_frequencies must be >= 0");
  if (!(base_scale > 0.0) || !std::isfinite(base_scale)) throw ArgumentError("base_scale must be positive");
}

double gabor_activation(double x, double omega0, double s0) {
  const double sx = s0 * x;
  return std::cos(omega0 * x) * std::exp(-sx * sx);
}

template <typename T>
NetworkShape InrParams<T>::shape() const {
  NetworkShape s;
  s.input_width = static_cast<int>(layers.front().weight.cols());
  s.hidden_layers = static_cast<int>(layers.size()) - 2;
  s.width = static_cast<int>(layers.front().weight.rows());
  s.outputs = static_cast<int>(layers.back().weight.rows());
  return s;
}

template <typename T>
std::size_t InrParams<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

template <typename T>
T& InrParams<T>::flat(std::size_t i) {
  for (auto& l : layers) {
    const auto nw = static_cast<std::size_t>(l.weight.size());
    if (i < nw) return l.weight.data()[i];
    i -= nw;
    const auto nb = static_cast<std::size_t>(l.bias.size());
    if (i < nb) return l.bias.data()[i];
    i -= nb;
  }
  throw ArgumentError("flat parameter index out of range");
}

template <typename T>
T InrParams<T>::flat(std::size_t i) const {
  return const_cast<InrParams<T>*>(this)->flat(i);
}

template <typename T>
LayerSet<T> zeros_like(const LayerSet<T>& layers) {
  LayerSet<T> out;
  out.reserve(layers.size());
  for (const auto& l : layers)
    out.push_back({Mat<T>::Zero(l.weight.rows(), l.weight.cols()), Vec<T>::Zero(l.bias.size())});
  return out;
}

template <typename T>
InrParams<T> init_params(const NetworkShape& shape, const EmbeddingConfig& embedding, const GaborParams& gabor,
                         std::uint64_t seed, const InitScheme& scheme) {
  if (shape.hidden_layers < 0 || shape.width < 1 || shape.outputs != 5)
    throw ArgumentError("network needs >= 0 hidden layers, width >= 1 and 5 outputs");
  if (shape.input_width != embedding.width()) throw ArgumentError("network input width must match the embedding");
  InrParams<T> p;
  p.embedding = embedding;
  p.frequencies = embedding.frequencies();
  p.gabor = gabor;
  SeqRng rng(hash_combine(seed, 0x696e6974ULL));
  const int n = shape.num_layers();
  for (int l = 0; l < n; ++l) {
    const int in = l == 0 ? shape.input_width : shape.width;
    const int out = l == n - 1 ? shape.outputs : shape.width;
    const double scale = l == 0 ? scheme.first_layer_scale : (l == n - 1 ? scheme.output_scale : scheme.hidden_scale);
    const double bound = scale * std::sqrt(6.0 / in);
    Layer<T> layer{Mat<T>(out, in), Vec<T>::Zero(out)};
    // Row-major fill so the stream order does not depend on storage order.
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) layer.weight(r, c) = static_cast<T>(rng.uniform(-bound, bound));
    p.layers.push_back(std::move(layer));
  }
  p.layers.back().bias(0) = static_cast<T>(scheme.intensity_bias);
  return p;
}

template <typename T>
Mat<T> fourier_embed(const Mat<T>& coords, std::span<const double> frequencies) {
  if (coords.rows() != 3) throw ArgumentError("coordinates must have 3 rows");
  if (coords.size() > 0 && coords.cwiseAbs().maxCoeff() > T(1))
    throw ArgumentError("coordinates must lie in [-1, 1]^3");
  const auto L = static_cast<Eigen::Index>(frequencies.size());
  Mat<T> out(3 + 6 * L, coords.cols());
  out.topRows(3) = coords;
  for (Eigen::Index k = 0; k < L; ++k) {
    const T w = static_cast<T>(2.0 * std::numbers::pi * frequencies[static_cast<std::size_t>(k)]);
    const auto arg = (coords.array() * w).eval();
    out.middleRows(3 + 6 * k, 3) = arg.sin().matrix();
    out.middleRows(3 + 6 * k + 3, 3) = arg.cos().matrix();
  }
  return out;
}

std::vector<double> fourier_embed(const std::array<double, 3>& coord, const EmbeddingConfig& config) {
  Mat<double> c(3, 1);
  c << coord[0], coord[1], coord[2];
  const auto f = config.frequencies();
  const Mat<double> e = fourier_embed<double>(c, f);
  return {e.data(), e.data() + e.size()};
}

namespace {

constexpr Eigen::Index kChunk = 256;

// W x + b evaluated in fixed-width column chunks, so every column goes
// through the same kernel regardless of batch size or position.
template <typename T>
Mat<T> affine(const Layer<T>& layer, const Mat<T>& x) {
  const Eigen::Index batch = x.cols();
  Mat<T> z(layer.weight.rows(), batch);
  Mat<T> xbuf(x.rows(), kChunk);
  Mat<T> zbuf(layer.weight.rows(), kChunk);
  for (Eigen::Index c = 0; c < batch; c += kChunk) {
    const Eigen::Index w = std::min(kChunk, batch - c);
    if (w < kChunk) xbuf.setZero();
    xbuf.leftCols(w) = x.middleCols(c, w);
    zbuf.noalias() = layer.weight * xbuf;
    z.middleCols(c, w) = zbuf.leftCols(w);
  }
  z.colwise() += layer.bias;
  return z;
}

template <typename T>
Mat<T> gabor(const Mat<T>& z, const GaborParams& g) {
  const T w = static_cast<T>(g.omega0), s = static_cast<T>(g.s0);
  const auto a = z.array();
  return ((a * w).cos() * (-(a * s).square()).exp()).matrix();
}

template <typename T>
Mat<T> gabor_derivative(const Mat<T>& z, const GaborParams& g) {
  const T w = static_cast<T>(g.omega0), s = static_cast<T>(g.s0);
  const auto a = z.array();
  const auto env = (-(a * s).square()).exp();
  return (env * (-w * (a * w).sin() - T(2) * s * s * a * (a * w).cos())).matrix();
}

template <typename T>
NetworkOutput<T> heads(Mat<T> pre) {
  NetworkOutput<T> out;
  const Eigen::Index batch = pre.cols();
  out.intensity = pre.row(0).transpose().cwiseMax(T(0));
  out.probs.resize(4, batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    const auto logits = pre.col(j).template tail<4>();
    const T mx = logits.maxCoeff();
    T sum = 0;
    for (int c = 0; c < 4; ++c) {
      const T e = std::exp(logits(c) - mx);
      out.probs(c, j) = e;
      sum += e;
    }
    out.probs.col(j) /= sum;
  }
  out.pre = std::move(pre);
  return out;
}

}  // namespace

template <typename T>
ForwardTrace<T> forward_trace(const InrParams<T>& params, const Mat<T>& features) {
  if (params.layers.empty()) throw ArgumentError("network has no layers");
  if (features.rows() != params.layers.front().weight.cols())
    throw ArgumentError("feature width " + std::to_string(features.rows()) + " does not match network input " +
                        std::to_string(params.layers.front().weight.cols()));
  ForwardTrace<T> t;
  const std::size_t n = params.layers.size();
  t.inputs.reserve(n);
  t.pre.reserve(n);
  t.inputs.push_back(features);
  for (std::size_t l = 0; l < n; ++l) {
    t.pre.push_back(affine(params.layers[l], t.inputs.back()));
    if (l + 1 < n) t.inputs.push_back(gabor(t.pre.back(), params.gabor));
  }
  t.output = heads<T>(t.pre.back());
  return t;
}

template <typename T>
NetworkOutput<T> forward(const InrParams<T>& params, const Mat<T>& features) {
  if (params.layers.empty()) throw ArgumentError("network has no layers");
  if (features.rows() != params.layers.front().weight.cols())
    throw ArgumentError("feature width does not match network input");
  Mat<T> x = features;
  const std::size_t n = params.layers.size();
  for (std::size_t l = 0; l + 1 < n; ++l) x = gabor(affine(params.layers[l], x), params.gabor);
  return heads<T>(affine(params.layers.back(), x));
}

template <typename T>
LayerSet<T> backward(const InrParams<T>& params, const ForwardTrace<T>& trace, const Mat<T>& d_pre) {
  const std::size_t n = params.layers.size();
  LayerSet<T> grads(n);
  Mat<T> dz = d_pre;
  for (std::size_t l = n; l-- > 0;) {
    grads[l].weight.noalias() = dz * trace.inputs[l].transpose();
    grads[l].bias = dz.rowwise().sum();
    if (l == 0) break;
    Mat<T> da = params.layers[l].weight.transpose() * dz;
    dz = (da.array() * gabor_derivative(trace.pre[l - 1], params.gabor).array()).matrix();
  }
  return grads;
}

template <typename T>
Mat<T> heads_backward(const NetworkOutput<T>& out, const Vec<T>& d_intensity, const Mat<T>& d_probs) {
  const Eigen::Index batch = out.pre.cols();
  Mat<T> d(5, batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    d(0, j) = out.pre(0, j) > T(0) ? d_intensity(j) : T(0);
    T dot = 0;
    for (int c = 0; c < 4; ++c) dot += out.probs(c, j) * d_probs(c, j);
    for (int c = 0; c < 4; ++c) d(1 + c, j) = out.probs(c, j) * (d_probs(c, j) - dot);
  }
  return d;
}

template <typename T>
Vec<T> reconstruct(const NetworkOutput<T>& out) {
  Vec<T> r(out.intensity.size());
  for (Eigen::Index j = 0; j < r.size(); ++j)
    r(j) = out.intensity(j) * (out.probs(1, j) + out.probs(2, j) + out.probs(3, j));
  return r;
}

double reconstruct(double intensity, const std::array<double, 4>& probs) {
  return intensity * (probs[1] + probs[2] + probs[3]);
}

double grid_coordinate(int i, int n) { return -1.0 + static_cast<double>(2 * i + 1) / static_cast<double>(n); }

GridPrediction predict_grid(const InrParams<float>& params, Dims dims) {
  if (!dims.valid()) throw ArgumentError("prediction dims must be positive");
  const std::size_t total = dims.count();
  std::vector<float> intensity(total);
  std::vector<float> probs(total * kNumClasses);
  constexpr std::size_t kBlock = 16 * kChunk;
  Mat<float> coords(3, static_cast<Eigen::Index>(kBlock));
  for (std::size_t start = 0; start < total; start += kBlock) {
    const std::size_t count = std::min(kBlock, total - start);
    coords.resize(3, static_cast<Eigen::Index>(count));
    for (std::size_t v = 0; v < count; ++v) {
      const std::size_t idx = start + v;
      const int x = static_cast<int>(idx % static_cast<std::size_t>(dims.nx));
      const int y = static_cast<int>((idx / static_cast<std::size_t>(dims.nx)) % static_cast<std::size_t>(dims.ny));
      const int z = static_cast<int>(idx / (static_cast<std::size_t>(dims.nx) * static_cast<std::size_t>(dims.ny)));
      const auto col = static_cast<Eigen::Index>(v);
      coords(0, col) = static_cast<float>(grid_coordinate(x, dims.nx));
      coords(1, col) = static_cast<float>(grid_coordinate(y, dims.ny));
      coords(2, col) = static_cast<float>(grid_coordinate(z, dims.nz));
    }
    const auto out = forward(params, fourier_embed<float>(coords, params.frequencies));
    const Vec<float> rec = reconstruct(out);
    for (std::size_t v = 0; v < count; ++v) {
      const auto col = static_cast<Eigen::Index>(v);
      intensity[start + v] = rec(col);
      for (int c = 0; c < kNumClasses; ++c) probs[(start + v) * kNumClasses + c] = out.probs(c, col);
    }
  }
  return {Volume(dims, std::move(intensity)), Segmentation::soft(dims, std::move(probs))};
}

namespace {

constexpr char kMagic[8] = {'F', 'S', 'I', 'N', 'R', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const InrParams<float>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(params.embedding.mode));
  write_pod(out, static_cast<std::int32_t>(params.embedding.num_frequencies));
  write_pod(out, params.embedding.base_scale);
  write_pod(out, params.embedding.seed);
  for (double f : params.frequencies) write_pod(out, f);
  write_pod(out, params.gabor.omega0);
  write_pod(out, params.gabor.s0);
  write_pod(out, static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    write_pod(out, static_cast<std::uint32_t>(l.weight.rows()));
    write_pod(out, static_cast<std::uint32_t>(l.weight.cols()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) write_pod(out, l.weight(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) write_pod(out, l.bias(r));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

InrParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw FormatError("not a checkpoint: " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kVersion) throw UnsupportedError("unsupported checkpoint version " + std::to_string(version));
  InrParams<float> p;
  const auto mode = read_pod<std::uint32_t>(in);
  if (mode > 1) throw FormatError("bad embedding mode in checkpoint");
  p.embedding.mode = static_cast<EmbeddingMode>(mode);
  p.embedding.num_frequencies = read_pod<std::int32_t>(in);
  if (p.embedding.num_frequencies < 0 || p.embedding.num_frequencies > 64) throw FormatError("bad frequency count");
  p.embedding.base_scale = read_pod<double>(in);
  p.embedding.seed = read_pod<std::uint64_t>(in);
  for (int k = 0; k < p.embedding.num_frequencies; ++k) p.frequencies.push_back(read_pod<double>(in));
  p.gabor.omega0 = read_pod<double>(in);
  p.gabor.s0 = read_pod<double>(in);
  const auto n = read_pod<std::uint32_t>(in);
  if (n < 2 || n > 64) throw FormatError("bad layer count in checkpoint");
  for (std::uint32_t l = 0; l < n; ++l) {
    const auto rows = read_pod<std::uint32_t>(in);
    const auto cols = read_pod<std::uint32_t>(in);
    if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) throw FormatError("bad layer shape in checkpoint");
    Layer<float> layer{Mat<float>(rows, cols), Vec<float>(rows)};
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) layer.weight(r, c) = read_pod<float>(in);
    for (std::uint32_t r = 0; r < rows; ++r) layer.bias(r) = read_pod<float>(in);
    if (!p.layers.empty() && p.layers.back().weight.rows() != layer.weight.cols())
      throw FormatError("inconsistent layer shapes in checkpoint");
    p.layers.push_back(std::move(layer));
  }
  if (p.layers.front().weight.cols() != p.embedding.width()) throw FormatError("checkpoint input width mismatch");
  return p;
}

#define FIELDSYNTH_INSTANTIATE(T)                                                                                \
  template struct InrParams<T>;                                                                                  \
  template LayerSet<T> zeros_like(const LayerSet<T>&);                                                           \
  template InrParams<T> init_params(const NetworkShape&, const EmbeddingConfig&, const GaborParams&,            \
                                    std::uint64_t, const InitScheme&);                                           \
  template Mat<T> fourier_embed(const Mat<T>&, std::span<const double>);                                         \
  template ForwardTrace<T> forward_trace(const InrParams<T>&, const Mat<T>&);                                    \
  template NetworkOutput<T> forward(const InrParams<T>&, const Mat<T>&);                                         \
  template LayerSet<T> backward(const InrParams<T>&, const ForwardTrace<T>&, const Mat<T>&);                     \
  template Mat<T> heads_backward(const NetworkOutput<T>&, const Vec<T>&, const Mat<T>&);                         \
  template Vec<T> reconstruct(const NetworkOutput<T>&);

FIELDSYNTH_INSTANTIATE(float)
FIELDSYNTH_INSTANTIATE(double)

#undef FIELDSYNTH_INSTANTIATE

}  // namespace fieldsynth::inr
