#include "fieldsynth/config_io.hpp"

#include <set>
#include <string>

#include "fieldsynth/error.hpp"

namespace fieldsynth::config {

namespace {

// Reads selected keys of an object and complains about the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ArgumentError(where_ + ": expected a JSON object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ArgumentError(where_ + ": unknown key \"" + key + "\"");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ArgumentError(where_ + "." + key + ": wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json triple(const std::array<double, 3>& v) { return json::array({v[0], v[1], v[2]}); }

void read_dims(Reader& r, const char* key, Dims& dims) {
  if (const json* d = r.child(key)) {
    if (d->is_number_integer()) {
      const int n = d->get<int>();
      dims = {n, n, n};
    } else if (d->is_array() && d->size() == 3) {
      dims = {(*d)[0].get<int>(), (*d)[1].get<int>(), (*d)[2].get<int>()};
    } else {
      throw ArgumentError(r.where() + "." + key + ": expected an integer or [nx, ny, nz]");
    }
  }
}

std::array<double, 3> read_triple(const json& j, const char* a, const char* b, const char* c, const std::string& where) {
  try {
    if (j.is_array() && j.size() == 3) return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    if (j.is_object()) {
      std::array<double, 3> out{};
      Reader r(j, where);
      std::array<bool, 3> present{j.contains(a), j.contains(b), j.contains(c)};
      r.get(a, out[0]);
      r.get(b, out[1]);
      r.get(c, out[2]);
      if (!(present[0] && present[1] && present[2]))
        throw ArgumentError(where + ": needs keys " + a + ", " + b + ", " + c);
      return out;
    }
  } catch (const json::exception&) {
  }
  throw ArgumentError(where + ": expected three numbers");
}

}  // namespace

json to_json(const PhantomSpec& s) {
  return {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
          {"csf_radii", triple(s.csf_radii)},
          {"gm_radii", triple(s.gm_radii)},
          {"wm_radii", triple(s.wm_radii)},
          {"wm_intensity", s.wm_intensity},
          {"gm_intensity", s.gm_intensity},
          {"csf_intensity", s.csf_intensity},
          {"background", s.background},
          {"background_noise", s.background_noise},
          {"tissue_noise", s.tissue_noise},
          {"spacing", triple(s.spacing)}};
}

void apply(const json& j, PhantomSpec& s) {
  Reader r(j, "phantom");
  read_dims(r, "dims", s.dims);
  r.get("csf_radii", s.csf_radii);
  r.get("gm_radii", s.gm_radii);
  r.get("wm_radii", s.wm_radii);
  r.get("wm_intensity", s.wm_intensity);
  r.get("gm_intensity", s.gm_intensity);
  r.get("csf_intensity", s.csf_intensity);
  r.get("background", s.background);
  r.get("background_noise", s.background_noise);
  r.get("tissue_noise", s.tissue_noise);
  r.get("spacing", s.spacing);
}

json to_json(const ForwardConfig& c) {
  return {{"sigma_smooth", c.sigma_smooth},     {"df", c.df},
          {"noise_rho", c.noise_rho},           {"noise_sigma", c.noise_sigma},
          {"intensity_scale", c.intensity_scale}, {"seed", c.seed}};
}

void apply(const json& j, ForwardConfig& c) {
  Reader r(j, "forward");
  r.get("sigma_smooth", c.sigma_smooth);
  r.get("df", c.df);
  r.get("noise_rho", c.noise_rho);
  r.get("noise_sigma", c.noise_sigma);
  r.get("intensity_scale", c.intensity_scale);
  r.get("seed", c.seed);
}

json to_json(const SolverConfig& c) { return {{"epsilon", c.epsilon}, {"grid_step", c.grid_step}}; }

void apply(const json& j, SolverConfig& c) {
  Reader r(j, "solver");
  r.get("epsilon", c.epsilon);
  r.get("grid_step", c.grid_step);
}

json to_json(const train::TrainConfig& c) {
  return {{"weights", {{"mae", c.weights.mae}, {"seg", c.weights.seg}, {"tv", c.weights.tv}, {"preact", c.weights.preact}}},
          {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"iterations", c.iterations},
          {"patch_size", c.patch_size},
          {"batch_patches", c.batch_patches},
          {"seed", c.seed},
          {"run", c.run},
          {"sigma_smooth", c.sigma_smooth},
          {"df", c.df},
          {"network", {{"hidden_layers", c.shape.hidden_layers}, {"width", c.shape.width}}},
          {"embedding",
           {{"num_frequencies", c.embedding.num_frequencies},
            {"base_scale", c.embedding.base_scale},
            {"mode", c.embedding.mode == inr::EmbeddingMode::LogLinear ? "loglinear" : "gaussian"},
            {"seed", c.embedding.seed}}},
          {"gabor", {{"omega0", c.gabor.omega0}, {"s0", c.gabor.s0}}},
          {"init",
           {{"first_layer_scale", c.init.first_layer_scale},
            {"hidden_scale", c.init.hidden_scale},
            {"output_scale", c.init.output_scale},
            {"intensity_bias", c.init.intensity_bias}}}};
}

void apply(const json& j, train::TrainConfig& c) {
  Reader r(j, "train");
  if (const json* w = r.child("weights")) {
    Reader rw(*w, "train.weights");
    rw.get("mae", c.weights.mae);
    rw.get("seg", c.weights.seg);
    rw.get("tv", c.weights.tv);
    rw.get("preact", c.weights.preact);
  }
  if (const json* a = r.child("adam")) {
    Reader ra(*a, "train.adam");
    ra.get("lr", c.adam.lr);
    ra.get("beta1", c.adam.beta1);
    ra.get("beta2", c.adam.beta2);
    ra.get("eps", c.adam.eps);
  }
  r.get("iterations", c.iterations);
  r.get("patch_size", c.patch_size);
  r.get("batch_patches", c.batch_patches);
  r.get("seed", c.seed);
  r.get("run", c.run);
  r.get("sigma_smooth", c.sigma_smooth);
  r.get("df", c.df);
  if (const json* n = r.child("network")) {
    Reader rn(*n, "train.network");
    rn.get("hidden_layers", c.shape.hidden_layers);
    rn.get("width", c.shape.width);
  }
  if (const json* e = r.child("embedding")) {
    Reader re(*e, "train.embedding");
    re.get("num_frequencies", c.embedding.num_frequencies);
    re.get("base_scale", c.embedding.base_scale);
    re.get("seed", c.embedding.seed);
    std::string mode;
    re.get("mode", mode);
    if (mode == "loglinear") c.embedding.mode = inr::EmbeddingMode::LogLinear;
    else if (mode == "gaussian") c.embedding.mode = inr::EmbeddingMode::Gaussian;
    else if (!mode.empty()) throw ArgumentError("train.embedding.mode must be \"loglinear\" or \"gaussian\"");
  }
  c.shape.input_width = c.embedding.width();
  if (const json* g = r.child("gabor")) {
    Reader rg(*g, "train.gabor");
    rg.get("omega0", c.gabor.omega0);
    rg.get("s0", c.gabor.s0);
  }
  if (const json* i = r.child("init")) {
    Reader ri(*i, "train.init");
    ri.get("first_layer_scale", c.init.first_layer_scale);
    ri.get("hidden_scale", c.init.hidden_scale);
    ri.get("output_scale", c.init.output_scale);
    ri.get("intensity_bias", c.init.intensity_bias);
  }
}

json to_json(const DegradationVector& m) { return {{"wm", m.wm}, {"gm", m.gm}, {"csf", m.csf}}; }

DegradationVector degradation_from_json(const json& j) {
  const auto v = read_triple(j, "wm", "gm", "csf", "m");
  DegradationVector m{v[0], v[1], v[2]};
  m.validate();
  return m;
}

json to_json(const ContrastTriple& c) { return {{"wc", c.wc}, {"wg", c.wg}, {"gc", c.gc}}; }

ContrastTriple contrast_from_json(const json& j) {
  const auto v = read_triple(j, "wc", "wg", "gc", "target");
  return {v[0], v[1], v[2]};
}

}  // namespace fieldsynth::config
