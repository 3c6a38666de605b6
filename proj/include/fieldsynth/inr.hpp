#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "fieldsynth/volume.hpp"

namespace fieldsynth::inr {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class EmbeddingMode : std::uint32_t { LogLinear = 0, Gaussian = 1 };

// Coordinates are lifted to [w, sin(2 pi f_k w), cos(2 pi f_k w)] per
// frequency, giving 3 + 6L features.
struct EmbeddingConfig {
  int num_frequencies = 6;
  // Log-linear: f_k = base_scale * 2^k. Gaussian: |f_k| ~ |N(0, base_scale^2)|.
  double base_scale = 1.0;
  EmbeddingMode mode = EmbeddingMode::LogLinear;
  std::uint64_t seed = 0;

  int width() const { return 3 + 6 * num_frequencies; }
  std::vector<double> frequencies() const;
  void validate() const;
};

struct GaborParams {
  double omega0 = 20.0;
  double s0 = 10.0;
};

// cos(omega0 x) * exp(-(s0 x)^2)
double gabor_activation(double x, double omega0, double s0);

struct NetworkShape {
  int input_width = 39;
  int hidden_layers = 3;
  int width = 128;
  int outputs = 5;

  int num_layers() const { return hidden_layers + 2; }
  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

// Uniform init bounds, as multiples of sqrt(6 / fan_in).
struct InitScheme {
  double first_layer_scale = 1.0 / 20.0;
  double hidden_scale = 1.0 / 20.0;
  // Gabor outputs sit near 1 at init, so an unscaled output layer can start
  // the ReLU intensity head below zero everywhere.
  double output_scale = 1.0 / 20.0;
  // Starting bias of the intensity channel, so the ReLU head is active.
  double intensity_bias = 0.5;
};

template <typename T>
struct Layer {
  Mat<T> weight;  // out x in
  Vec<T> bias;    // out
};

template <typename T>
using LayerSet = std::vector<Layer<T>>;

// Trainable weights plus the fixed embedding frequencies and activation
// constants. Layer 0 maps the embedding to the hidden width; the last layer
// produces the 5 pre-activations (intensity, BG, WM, GM, CSF).
template <typename T>
struct InrParams {
  LayerSet<T> layers;
  EmbeddingConfig embedding;
  std::vector<double> frequencies;
  GaborParams gabor;

  NetworkShape shape() const;
  std::size_t num_parameters() const;
  // Flat view: for each layer, weight (column-major) then bias.
  T& flat(std::size_t i);
  T flat(std::size_t i) const;

  template <typename U>
  InrParams<U> cast() const {
    InrParams<U> out;
    out.embedding = embedding;
    out.frequencies = frequencies;
    out.gabor = gabor;
    for (const auto& l : layers) out.layers.push_back({l.weight.template cast<U>(), l.bias.template cast<U>()});
    return out;
  }
};

template <typename T>
LayerSet<T> zeros_like(const LayerSet<T>& layers);

template <typename T>
InrParams<T> init_params(const NetworkShape& shape, const EmbeddingConfig& embedding, const GaborParams& gabor,
                         std::uint64_t seed, const InitScheme& scheme = {});

// Throws ArgumentError when any coordinate leaves [-1, 1].
template <typename T>
Mat<T> fourier_embed(const Mat<T>& coords, std::span<const double> frequencies);

std::vector<double> fourier_embed(const std::array<double, 3>& coord, const EmbeddingConfig& config);

template <typename T>
struct NetworkOutput {
  Mat<T> pre;        // 5 x B raw outputs
  Vec<T> intensity;  // ReLU(pre row 0)
  Mat<T> probs;      // 4 x B softmax of pre rows 1..4
};

// Intermediate values kept for the backward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Mat<T>> inputs;  // input of each layer
  std::vector<Mat<T>> pre;     // affine output of each layer
  NetworkOutput<T> output;
};

template <typename T>
ForwardTrace<T> forward_trace(const InrParams<T>& params, const Mat<T>& features);

template <typename T>
NetworkOutput<T> forward(const InrParams<T>& params, const Mat<T>& features);

// Reverse pass from dLoss/dpre (5 x B) to parameter gradients.
template <typename T>
LayerSet<T> backward(const InrParams<T>& params, const ForwardTrace<T>& trace, const Mat<T>& d_pre);

// Gradient through the heads: dLoss/dpre from dLoss/dintensity and
// dLoss/dprobs. ReLU has derivative 0 at 0.
template <typename T>
Mat<T> heads_backward(const NetworkOutput<T>& out, const Vec<T>& d_intensity, const Mat<T>& d_probs);

// intensity * (p_WM + p_GM + p_CSF)
template <typename T>
Vec<T> reconstruct(const NetworkOutput<T>& out);

double reconstruct(double intensity, const std::array<double, 4>& probs);

// Voxel i of an n-voxel axis maps to -1 + (2i + 1) / n.
double grid_coordinate(int i, int n);

struct GridPrediction {
  Volume intensity;  // reconstructed intensity
  Segmentation segmentation;  // soft
};

GridPrediction predict_grid(const InrParams<float>& params, Dims dims);

// Versioned binary checkpoint (float32 weights).
void save_checkpoint(const InrParams<float>& params, const std::filesystem::path& path);
InrParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace fieldsynth::inr
