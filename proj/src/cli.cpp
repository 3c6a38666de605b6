#include "fieldsynth/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <atomic>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "fieldsynth/config_io.hpp"
#include "fieldsynth/contrast.hpp"
#include "fieldsynth/error.hpp"
#include "fieldsynth/forward_model.hpp"
#include "fieldsynth/metrics.hpp"
#include "fieldsynth/nifti.hpp"
#include "fieldsynth/phantom.hpp"
#include "fieldsynth/pipeline.hpp"
#include "fieldsynth/trainer.hpp"

#ifndef FIELDSYNTH_VERSION
#define FIELDSYNTH_VERSION "0.0.0"
#endif

namespace fieldsynth::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- helpers

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f.flush()) throw IoError("cannot write " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw IoError(std::string(what) + " not found: " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + " is not valid JSON (" + path.string() + "): " + e.what());
  }
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (item.empty() || used != item.size()) throw ArgumentError(std::string(what) + ": cannot parse \"" + item + "\"");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError(std::string(what) + ": empty list");
  return out;
}

std::array<double, 3> parse_triple(const std::string& text, const char* what) {
  const auto v = parse_list(text, what);
  if (v.size() != 3) throw ArgumentError(std::string(what) + ": expected three comma-separated numbers");
  return {v[0], v[1], v[2]};
}

Dims parse_dims(const std::string& text) {
  const auto v = parse_list(text, "--dims");
  auto as_int = [](double d) {
    if (d != std::floor(d) || d < 1 || d > 4096) throw ArgumentError("--dims: extents must be positive integers");
    return static_cast<int>(d);
  };
  if (v.size() == 1) return {as_int(v[0]), as_int(v[0]), as_int(v[0])};
  if (v.size() == 3) return {as_int(v[0]), as_int(v[1]), as_int(v[2])};
  throw ArgumentError("--dims: expected N or NX,NY,NZ");
}

// New extents with the ellipsoid radii scaled per axis to keep proportions.
void resize_phantom(PhantomSpec& spec, Dims dims) {
  for (int a = 0; a < 3; ++a) {
    const double k = static_cast<double>(dims[a]) / spec.dims[a];
    spec.csf_radii[a] *= k;
    spec.gm_radii[a] *= k;
    spec.wm_radii[a] *= k;
  }
  spec.dims = dims;
}

Volume load_volume(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path.string());
  return load_nifti(path).volume;
}

Segmentation load_labels(const fs::path& path, const char* what) {
  return Segmentation::from_label_volume(load_volume(path, what));
}

fs::path with_suffix(const fs::path& base, const std::string& suffix, const std::string& ext) {
  fs::path p = base.parent_path() / base.stem();
  p += suffix + ext;
  return p;
}

std::string rel(const fs::path& p) { return p.lexically_normal().generic_string(); }

// Resolved configuration shared by the commands; each command reads the
// sections it needs.
struct Settings {
  PhantomSpec phantom = pipeline::ExperimentConfig::default_phantom();
  std::uint64_t phantom_seed = 0;
  ForwardConfig forward{};
  SolverConfig solver{};
  train::TrainConfig train{};
  ContrastTriple target{2.0, 12.0, 17.0};
  json sweep = json::object();
};

void apply_config_file(const fs::path& path, Settings& s, std::optional<std::uint64_t>* seed) {
  const json j = read_json_file(path, "config");
  if (!j.is_object()) throw ArgumentError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "phantom") config::apply(value, s.phantom);
    else if (key == "phantom_seed") s.phantom_seed = value.get<std::uint64_t>();
    else if (key == "forward") config::apply(value, s.forward);
    else if (key == "solver") config::apply(value, s.solver);
    else if (key == "train") config::apply(value, s.train);
    else if (key == "target") s.target = config::contrast_from_json(value);
    else if (key == "sweep") s.sweep = value;
    else if (key == "seed") {
      if (seed) *seed = value.get<std::uint64_t>();
    } else {
      throw ArgumentError("config: unknown key \"" + key + "\"");
    }
  }
}

struct Manifest {
  Manifest(std::string cmd, std::vector<std::string> args) : command(std::move(cmd)), argv(std::move(args)) {}

  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::optional<std::uint64_t> seed;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& path) const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["cwd"] = fs::current_path().string();
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["version"] = FIELDSYNTH_VERSION;
    j["duration_seconds"] = seconds;
    write_text_atomic(path, j.dump(2) + "\n");
  }
};

DegradationVector resolve_m(const std::string& inline_m, const std::string& m_json) {
  if (!inline_m.empty() && !m_json.empty()) throw ArgumentError("give either --m or --m-json, not both");
  if (!inline_m.empty()) {
    const auto v = parse_triple(inline_m, "--m");
    DegradationVector m{v[0], v[1], v[2]};
    m.validate();
    return m;
  }
  if (!m_json.empty()) {
    const json j = read_json_file(m_json, "m file");
    return config::degradation_from_json(j.is_object() && j.contains("m") ? j.at("m") : j);
  }
  throw ArgumentError("the degradation vector is required (--m or --m-json)");
}

// Box spec: {"wm": [x0,x1,y0,y1,z0,z1] or a list of such boxes, ...}, with
// half-open ranges. Keys: wm, gm, csf, bg.
RoiMasks masks_from_boxes(const json& j, Dims dims) {
  if (!j.is_object()) throw ArgumentError("mask spec must be a JSON object");
  RoiMasks masks;
  const std::size_t n = dims.count();
  for (auto* m : {&masks.wm, &masks.gm, &masks.csf, &masks.background}) m->assign(n, 0.0f);
  for (const auto& [key, value] : j.items()) {
    std::vector<float>* target = nullptr;
    if (key == "wm") target = &masks.wm;
    else if (key == "gm") target = &masks.gm;
    else if (key == "csf") target = &masks.csf;
    else if (key == "bg" || key == "background") target = &masks.background;
    else throw ArgumentError("mask spec: unknown key \"" + key + "\"");
    std::vector<json> boxes;
    if (value.is_array() && !value.empty() && value[0].is_array()) boxes.assign(value.begin(), value.end());
    else boxes.push_back(value);
    for (const json& b : boxes) {
      std::vector<int> r;
      try {
        r = b.get<std::vector<int>>();
      } catch (const json::exception&) {
      }
      if (r.size() != 6) throw ArgumentError("mask spec: box for " + key + " needs [x0,x1,y0,y1,z0,z1]");
      for (int a = 0; a < 3; ++a)
        if (r[2 * a] < 0 || r[2 * a] >= r[2 * a + 1] || r[2 * a + 1] > dims[a])
          throw ArgumentError("mask spec: box for " + key + " is empty or leaves the volume");
      for (int z = r[4]; z < r[5]; ++z)
        for (int y = r[2]; y < r[3]; ++y)
          for (int x = r[0]; x < r[1]; ++x) (*target)[dims.index(x, y, z)] = 1.0f;
    }
  }
  return masks;
}

RoiMasks load_masks(const fs::path& path, Dims dims) {
  if (!fs::exists(path)) throw IoError("mask not found: " + path.string());
  if (path.extension() == ".json") return masks_from_boxes(read_json_file(path, "mask spec"), dims);
  const Segmentation seg = load_labels(path, "mask");
  if (seg.dims() != dims) throw ArgumentError("mask dims do not match the volume");
  return RoiMasks::from_segmentation(seg);
}

std::string loss_csv(const std::vector<train::LossBreakdown>& history) {
  std::ostringstream os;
  os << "iteration,total,mae,seg,tv,preact\n" << std::setprecision(17);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& h = history[i];
    os << i << ',' << h.total << ',' << h.mae << ',' << h.seg << ',' << h.tv << ',' << h.preact << '\n';
  }
  return os.str();
}

train::ProgressFn progress_logger(std::ostream& err, int every) {
  if (every <= 0) return {};
  return [&err, every](int it, const train::LossBreakdown& l) {
    if (it % every == 0)
      err << "iter " << it << " total " << l.total << " mae " << l.mae << " seg " << l.seg << " tv " << l.tv
          << " preact " << l.preact << '\n';
  };
}

// ---------------------------------------------------------------- commands

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::vector<std::string> argv;
};

void add_common(CLI::App* sub, Common& c, const char* seed_help) {
  sub->add_option("--config", c.config_path, "JSON config (flags override it)");
  c.seed_opt = sub->add_option("--seed", c.seed, seed_help);
}

// Seed from flag, else config, else fallback.
std::uint64_t resolve_seed(const Common& c, const std::optional<std::uint64_t>& from_config, std::uint64_t fallback) {
  if (c.seed_opt->count()) return c.seed;
  return from_config.value_or(fallback);
}

struct MakePhantomArgs {
  Common common;
  std::string out, seg_out, dims;
  double background_noise = 0.0, tissue_noise = 0.0;
  CLI::Option *bg_opt = nullptr, *tissue_opt = nullptr;
};

int cmd_make_phantom(MakePhantomArgs& a, std::ostream& out) {
  Manifest manifest{"make-phantom", a.common.argv};
  Settings s;
  std::optional<std::uint64_t> cfg_seed;
  if (!a.common.config_path.empty()) apply_config_file(a.common.config_path, s, &cfg_seed);
  if (!a.dims.empty()) resize_phantom(s.phantom, parse_dims(a.dims));
  if (a.bg_opt->count()) s.phantom.background_noise = a.background_noise;
  if (a.tissue_opt->count()) s.phantom.tissue_noise = a.tissue_noise;
  const std::uint64_t seed = resolve_seed(a.common, cfg_seed, s.phantom_seed);
  s.phantom.validate();

  const Phantom p = make_phantom(s.phantom, seed);
  const fs::path vol_path = a.out;
  const fs::path seg_path = a.seg_out.empty() ? with_suffix(vol_path, "_seg", ".nii") : fs::path(a.seg_out);
  save_nifti(p.volume, vol_path, "fieldsynth phantom");
  save_nifti(p.segmentation.label_volume(), seg_path, "fieldsynth phantom labels");

  manifest.config = {{"phantom", config::to_json(s.phantom)}};
  manifest.seed = seed;
  manifest.outputs = {{"volume", rel(vol_path)}, {"segmentation", rel(seg_path)}};
  manifest.write(with_suffix(vol_path, "", ".manifest.json"));
  out << "wrote " << rel(vol_path) << " and " << rel(seg_path) << '\n';
  return kOk;
}

struct EstimateArgs {
  Common common;
  std::string hf, masks, target, out;
  double epsilon = 0.0, grid_step = 0.0;
  CLI::Option *eps_opt = nullptr, *step_opt = nullptr;
};

int cmd_estimate_contrast(EstimateArgs& a, std::ostream& out) {
  Manifest manifest{"estimate-contrast", a.common.argv};
  Settings s;
  if (!a.common.config_path.empty()) apply_config_file(a.common.config_path, s, nullptr);
  if (!a.target.empty()) {
    const auto c = parse_triple(a.target, "--target");
    s.target = {c[0], c[1], c[2]};
  }
  if (a.eps_opt->count()) s.solver.epsilon = a.epsilon;
  if (a.step_opt->count()) s.solver.grid_step = a.grid_step;
  s.solver.validate();

  const Volume hf = load_volume(a.hf, "HF volume");
  const RoiMasks masks = load_masks(a.masks, hf.dims());
  const SnrTriple snr = estimate_snr(hf, masks);
  const Matrix3 A = build_contrast_system(snr);
  const SolverResult sol = estimate_m(snr, s.target, s.solver);

  json result;
  result["snr"] = {{"wm", snr.wm}, {"gm", snr.gm}, {"csf", snr.csf}};
  result["A"] = json::array();
  for (const auto& row : A) result["A"].push_back(row);
  result["m"] = config::to_json(sol.m);
  result["objective"] = sol.objective;
  result["target"] = config::to_json(s.target);
  result["solver"] = config::to_json(s.solver);
  const std::string text = result.dump(2) + "\n";
  out << text;
  if (!a.out.empty()) {
    write_text_atomic(a.out, text);
    manifest.config = {{"solver", config::to_json(s.solver)}, {"target", config::to_json(s.target)}};
    manifest.inputs = {{"hf", rel(a.hf)}, {"masks", rel(a.masks)}};
    manifest.outputs = {{"result", rel(a.out)}};
    manifest.write(with_suffix(a.out, "", ".manifest.json"));
  }
  return kOk;
}

struct SimulateArgs {
  Common common;
  std::string hf, seg, m, m_json, out, seg_out;
  double sigma = 0, rho = 0, noise_sigma = 0, scale = 0;
  int df = 0;
  CLI::Option *sigma_opt = nullptr, *rho_opt = nullptr, *noise_opt = nullptr, *scale_opt = nullptr, *df_opt = nullptr;
};

int cmd_simulate_ulf(SimulateArgs& a, std::ostream& out) {
  Manifest manifest{"simulate-ulf", a.common.argv};
  Settings s;
  std::optional<std::uint64_t> cfg_seed;
  if (!a.common.config_path.empty()) apply_config_file(a.common.config_path, s, &cfg_seed);
  if (a.sigma_opt->count()) s.forward.sigma_smooth = a.sigma;
  if (a.rho_opt->count()) s.forward.noise_rho = a.rho;
  if (a.noise_opt->count()) s.forward.noise_sigma = a.noise_sigma;
  if (a.scale_opt->count()) s.forward.intensity_scale = a.scale;
  if (a.df_opt->count()) s.forward.df = a.df;
  s.forward.seed = resolve_seed(a.common, cfg_seed, s.forward.seed);
  s.forward.validate();
  const DegradationVector m = resolve_m(a.m, a.m_json);

  const Volume hf = load_volume(a.hf, "HF volume");
  const Segmentation seg = load_labels(a.seg, "segmentation");
  if (seg.dims() != hf.dims()) throw ArgumentError("segmentation is not aligned with the HF volume");
  const Volume ulf = simulate_ulf(hf, seg, m, s.forward);
  const Segmentation ulf_seg = downsample_labels(seg, s.forward.df);

  const fs::path vol_path = a.out;
  const fs::path seg_path = a.seg_out.empty() ? with_suffix(vol_path, "_seg", ".nii") : fs::path(a.seg_out);
  save_nifti(ulf, vol_path, "fieldsynth simulated ULF");
  save_nifti(ulf_seg.label_volume(), seg_path, "fieldsynth ULF labels");

  manifest.config = {{"forward", config::to_json(s.forward)}, {"m", config::to_json(m)}};
  manifest.seed = s.forward.seed;
  manifest.inputs = {{"hf", rel(a.hf)}, {"segmentation", rel(a.seg)}};
  manifest.outputs = {{"volume", rel(vol_path)}, {"segmentation", rel(seg_path)}};
  manifest.write(with_suffix(vol_path, "", ".manifest.json"));
  out << "wrote " << rel(vol_path) << " (" << ulf.dims().nx << "x" << ulf.dims().ny << "x" << ulf.dims().nz << ")\n";
  return kOk;
}

struct SynthArgs {
  Common common;
  std::string ulf, seg, m, m_json, out_dir = ".", prefix = "hf", weights, tune_lr, tune_tv;
  int iterations = 0, patch_size = 0, patches = 0, df = 0, log_every = 0, tune_iterations = 0;
  double lr = 0, sigma = 0;
  std::uint64_t run = 0;
  CLI::Option *iter_opt = nullptr, *patch_opt = nullptr, *patches_opt = nullptr, *df_opt = nullptr,
              *lr_opt = nullptr, *sigma_opt = nullptr, *run_opt = nullptr;
};

struct TuneRow {
  double lr, tv;
  metrics::MetricReport report;
  double final_total;
};

int cmd_synthesize_hf(SynthArgs& a, std::ostream& out, std::ostream& err) {
  Manifest manifest{"synthesize-hf", a.common.argv};
  Settings s;
  std::optional<std::uint64_t> cfg_seed;
  if (!a.common.config_path.empty()) apply_config_file(a.common.config_path, s, &cfg_seed);
  train::TrainConfig& tc = s.train;
  if (a.iter_opt->count()) tc.iterations = a.iterations;
  if (a.patch_opt->count()) tc.patch_size = a.patch_size;
  if (a.patches_opt->count()) tc.batch_patches = a.patches;
  if (a.df_opt->count()) tc.df = a.df;
  if (a.lr_opt->count()) tc.adam.lr = a.lr;
  if (a.sigma_opt->count()) tc.sigma_smooth = a.sigma;
  if (a.run_opt->count()) tc.run = a.run;
  if (!a.weights.empty()) {
    const auto w = parse_list(a.weights, "--weights");
    if (w.size() != 4) throw ArgumentError("--weights: expected l1,l2,l3,l4");
    tc.weights = {w[0], w[1], w[2], w[3]};
  }
  tc.seed = resolve_seed(a.common, cfg_seed, tc.seed);
  tc.validate();
  const DegradationVector m = resolve_m(a.m, a.m_json);

  const Volume ulf = load_volume(a.ulf, "ULF volume");
  const Segmentation seg = load_labels(a.seg, "segmentation");
  if (seg.dims() != ulf.dims()) throw ArgumentError("segmentation is not aligned with the ULF volume");

  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  auto path = [&](const std::string& suffix) { return dir / (a.prefix + suffix); };

  // Optional grid search, scored by RQS after re-degrading to ULF space.
  std::vector<TuneRow> tuning;
  if (!a.tune_lr.empty() || !a.tune_tv.empty()) {
    const auto lrs = a.tune_lr.empty() ? std::vector<double>{tc.adam.lr} : parse_list(a.tune_lr, "--tune-lr");
    const auto tvs = a.tune_tv.empty() ? std::vector<double>{tc.weights.tv} : parse_list(a.tune_tv, "--tune-tv");
    ForwardConfig fc = s.forward;
    fc.df = tc.df;
    fc.sigma_smooth = tc.sigma_smooth;
    for (double lr : lrs)
      for (double tv : tvs) {
        train::TrainConfig trial = tc;
        trial.adam.lr = lr;
        trial.weights.tv = tv;
        if (a.tune_iterations > 0) trial.iterations = a.tune_iterations;
        try {
          const auto syn = pipeline::synthesize_hf(ulf, seg, m, trial);
          tuning.push_back({lr, tv, pipeline::ulf_space_report(syn, ulf, seg, m, fc), syn.history.back().total});
          err << "tune lr " << lr << " tv " << tv << " rqs " << *tuning.back().report.rqs << '\n';
        } catch (const NumericalError& e) {
          err << "tune lr " << lr << " tv " << tv << " failed: " << e.what() << '\n';
        }
      }
    if (tuning.empty()) throw NumericalError("every tuning configuration diverged");
    const auto best = std::max_element(tuning.begin(), tuning.end(), [](const TuneRow& x, const TuneRow& y) {
      return *x.report.rqs < *y.report.rqs;
    });
    tc.adam.lr = best->lr;
    tc.weights.tv = best->tv;
    std::ostringstream os;
    os << "lr,tv,rqs,ssim,mslc,dice,iou,final_total\n" << std::setprecision(17);
    for (const auto& r : tuning) {
      const auto mean = metrics::mean_tissue_overlap(*r.report.overlap);
      os << r.lr << ',' << r.tv << ',' << *r.report.rqs << ',' << r.report.ssim << ',' << r.report.mslc << ','
         << mean.dice << ',' << mean.iou << ',' << r.final_total << '\n';
    }
    write_text_atomic(path("_tuning.csv"), os.str());
    manifest.outputs["tuning"] = rel(path("_tuning.csv"));
  }

  manifest.config = {{"train", config::to_json(tc)}, {"m", config::to_json(m)}};
  manifest.seed = tc.seed;
  manifest.inputs = {{"ulf", rel(a.ulf)}, {"segmentation", rel(a.seg)}};

  pipeline::Synthesis syn;
  try {
    syn = pipeline::synthesize_hf(ulf, seg, m, tc, progress_logger(err, a.log_every));
  } catch (const train::TrainingDiverged& e) {
    write_text_atomic(path("_loss.csv"), loss_csv(e.history()));
    manifest.outputs["loss"] = rel(path("_loss.csv"));
    manifest.write(path(".manifest.json"));
    throw;
  }

  save_nifti(syn.intensity, path(".nii"), "fieldsynth synthesized HF");
  save_nifti(syn.segmentation.hardened().label_volume().with_geometry(syn.intensity.spacing(), syn.intensity.affine()),
             path("_seg.nii"), "fieldsynth predicted labels");
  manifest.outputs["volume"] = rel(path(".nii"));
  manifest.outputs["segmentation"] = rel(path("_seg.nii"));
  for (int c = 0; c < kNumClasses; ++c) {
    const std::string name(tissue_name(static_cast<Tissue>(c)));
    const fs::path p = path("_prob_" + name + ".nii");
    save_nifti(syn.segmentation.prob_volume(static_cast<Tissue>(c)).with_geometry(syn.intensity.spacing(), syn.intensity.affine()),
               p, "fieldsynth class probability");
    manifest.outputs["prob_" + name] = rel(p);
  }
  inr::save_checkpoint(syn.params, path(".ckpt"));
  write_text_atomic(path("_loss.csv"), loss_csv(syn.history));
  const json sidecar = {{"m", config::to_json(m)}, {"config", config::to_json(tc)}, {"seed", tc.seed}};
  write_text_atomic(path(".json"), sidecar.dump(2) + "\n");
  manifest.outputs["checkpoint"] = rel(path(".ckpt"));
  manifest.outputs["loss"] = rel(path("_loss.csv"));
  manifest.outputs["sidecar"] = rel(path(".json"));
  manifest.write(path(".manifest.json"));

  const auto& last = syn.history.back();
  out << "trained " << syn.history.size() << " iterations, final loss " << format_double(last.total) << '\n'
      << "wrote " << rel(path(".nii")) << " (" << syn.intensity.dims().nx << "x" << syn.intensity.dims().ny << "x"
      << syn.intensity.dims().nz << ")\n";
  return kOk;
}

struct EvaluateArgs {
  Common common;
  std::string pred, ref, pred_seg, ref_seg, out, csv, label = "prediction";
  bool no_edges = false;
  metrics::CannyConfig canny{};
  double edge_tol = 1.0;
};

int cmd_evaluate(EvaluateArgs& a, std::ostream& out) {
  Manifest manifest{"evaluate", a.common.argv};
  const Volume pred = load_volume(a.pred, "prediction");
  const Volume ref = load_volume(a.ref, "reference");
  if (pred.dims() != ref.dims()) throw ArgumentError("prediction and reference dims differ");
  std::optional<Segmentation> pseg, rseg;
  if (!a.pred_seg.empty()) pseg = load_labels(a.pred_seg, "prediction segmentation");
  if (!a.ref_seg.empty()) rseg = load_labels(a.ref_seg, "reference segmentation");
  metrics::EvaluateOptions options;
  options.edges = !a.no_edges;
  options.canny = a.canny;
  options.edge_tolerance = a.edge_tol;
  const auto report =
      metrics::evaluate(pred, ref, pseg ? &*pseg : nullptr, rseg ? &*rseg : nullptr, options);

  auto show = [&](const std::string& name, std::optional<double> v) {
    out << std::left << std::setw(16) << name << (v ? format_double(*v) : std::string("-")) << '\n';
  };
  show("ssim", report.ssim);
  show("mslc", report.mslc);
  show("wm_gm_contrast", report.wm_gm_contrast);
  for (int c = 0; c < kNumClasses; ++c) {
    const std::string name(tissue_name(static_cast<Tissue>(c)));
    show("dice_" + name, report.overlap ? std::optional<double>((*report.overlap)[c].dice) : std::nullopt);
    show("iou_" + name, report.overlap ? std::optional<double>((*report.overlap)[c].iou) : std::nullopt);
  }
  show("edge_f1", report.edge_f1);
  show("rqs", report.rqs);

  manifest.inputs = {{"prediction", rel(a.pred)}, {"reference", rel(a.ref)}};
  if (pseg) manifest.inputs["prediction_segmentation"] = rel(a.pred_seg);
  if (rseg) manifest.inputs["reference_segmentation"] = rel(a.ref_seg);
  manifest.config = {{"edges", options.edges},
                     {"canny", {{"sigma", a.canny.sigma}, {"low", a.canny.low}, {"high", a.canny.high}}},
                     {"edge_tolerance", a.edge_tol}};
  std::optional<fs::path> primary;
  if (!a.out.empty()) {
    write_text_atomic(a.out, report.to_json().dump(2) + "\n");
    manifest.outputs["json"] = rel(a.out);
    primary = a.out;
  }
  if (!a.csv.empty()) {
    write_text_atomic(a.csv, metrics::MetricReport::csv_header() + "\n" + report.csv_row(a.label) + "\n");
    manifest.outputs["csv"] = rel(a.csv);
    if (!primary) primary = a.csv;
  }
  if (primary) manifest.write(with_suffix(*primary, "", ".manifest.json"));
  return kOk;
}

struct SensitivityArgs {
  Common common;
  std::string seeds, c_wg, targets, out_dir = "sensitivity", dims;
  int repeats = 1, iterations = 0, jobs = 1, log_every = 0;
  bool no_edges = false;
  CLI::Option *iter_opt = nullptr, *repeats_opt = nullptr;
};

struct Cell {
  ContrastTriple target;
  std::uint64_t seed;
  int repeat;
  std::optional<pipeline::ExperimentResult> result;
  std::string error;
};

std::vector<double> sample_stats(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? ss / (n - 1.0) : 0.0};
}

int cmd_sensitivity(SensitivityArgs& a, std::ostream& out, std::ostream& err) {
  Manifest manifest{"sensitivity", a.common.argv};
  Settings s;
  std::optional<std::uint64_t> cfg_seed;
  if (!a.common.config_path.empty()) apply_config_file(a.common.config_path, s, &cfg_seed);
  if (a.iter_opt->count()) s.train.iterations = a.iterations;
  if (!a.dims.empty()) resize_phantom(s.phantom, parse_dims(a.dims));

  // Sweep axes: flags, then the config's "sweep" section, then the base run.
  std::vector<double> seed_list, wg_list;
  std::vector<ContrastTriple> target_list;
  int repeats = a.repeats;
  if (!s.sweep.is_object()) throw ArgumentError("config: sweep must be an object");
  for (const auto& [key, value] : s.sweep.items()) {
    try {
      if (key == "seeds") seed_list = value.get<std::vector<double>>();
      else if (key == "c_wg") wg_list = value.get<std::vector<double>>();
      else if (key == "targets")
        for (const auto& t : value) target_list.push_back(config::contrast_from_json(t));
      else if (key == "repeats") {
        if (!a.repeats_opt->count()) repeats = value.get<int>();
      } else
        throw ArgumentError("config: unknown sweep key \"" + key + "\"");
    } catch (const json::exception&) {
      throw ArgumentError("config: sweep." + key + " has the wrong type");
    }
  }
  if (!a.seeds.empty()) seed_list = parse_list(a.seeds, "--seeds");
  if (!a.c_wg.empty()) {
    wg_list = parse_list(a.c_wg, "--c-wg");
    target_list.clear();
  }
  if (!a.targets.empty()) {
    target_list.clear();
    wg_list.clear();
    std::stringstream ss(a.targets);
    std::string item;
    while (std::getline(ss, item, ';')) {
      const auto c = parse_triple(item, "--targets");
      target_list.push_back({c[0], c[1], c[2]});
    }
  }
  for (double wg : wg_list) target_list.push_back(pipeline::sweep_target(wg));
  if (target_list.empty()) target_list.push_back(s.target);
  std::vector<std::uint64_t> seeds;
  for (double v : seed_list) {
    if (v < 0 || v != std::floor(v)) throw ArgumentError("seeds must be non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(v));
  }
  if (seeds.empty()) seeds.push_back(resolve_seed(a.common, cfg_seed, s.train.seed));
  if (repeats < 1) throw ArgumentError("--repeats must be >= 1");
  if (a.jobs < 1) throw ArgumentError("--jobs must be >= 1");
  s.phantom.validate();
  s.forward.validate();
  s.train.validate();

  std::vector<Cell> cells;
  for (const auto& t : target_list)
    for (std::uint64_t seed : seeds)
      for (int r = 0; r < repeats; ++r) cells.push_back({t, seed, r, std::nullopt, {}});

  metrics::EvaluateOptions options;
  options.edges = !a.no_edges;
  std::mutex log_mutex;
  auto run_cell = [&](std::size_t i) {
    Cell& cell = cells[i];
    pipeline::ExperimentConfig ec;
    ec.phantom = s.phantom;
    ec.phantom_seed = s.phantom_seed;
    ec.target = cell.target;
    ec.solver = s.solver;
    ec.forward = s.forward;
    ec.train = s.train;
    ec.train.seed = cell.seed;
    ec.train.run = static_cast<std::uint64_t>(cell.repeat);
    try {
      cell.result = pipeline::run_experiment(ec, {}, options);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    std::lock_guard lock(log_mutex);
    err << "cell " << i << (cell.result ? " done" : " failed: " + cell.error) << '\n';
  };
  if (a.jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < a.jobs; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    for (auto& t : pool) t.join();
  }

  const fs::path dir = a.out_dir;
  std::ostringstream csv;
  csv << "cell,target_wc,target_wg,target_gc,seed,repeat,status,m_wm,m_gm,m_csf,ssim,mslc,wm_gm_contrast,dice,iou,"
         "edge_f1,rqs,baseline_ssim,baseline_wm_gm_contrast,final_loss\n"
      << std::setprecision(17);
  std::map<std::string, std::vector<double>> columns;
  std::vector<std::pair<double, double>> pairs;
  json failures = json::array();
  const std::vector<std::string> metric_names = {"ssim", "mslc", "wm_gm_contrast", "dice", "iou", "edge_f1", "rqs"};
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& c = cells[i];
    csv << i << ',' << c.target.wc << ',' << c.target.wg << ',' << c.target.gc << ',' << c.seed << ',' << c.repeat
        << ',' << (c.result ? "ok" : "failed");
    if (!c.result) {
      csv << ",,,,,,,,,,,,,\n";
      failures.push_back({{"cell", i}, {"error", c.error}});
      continue;
    }
    const auto& r = *c.result;
    const auto& p = r.prediction;
    const auto mean = metrics::mean_tissue_overlap(*p.overlap);
    const std::vector<double> values = {p.ssim, p.mslc, *p.wm_gm_contrast, mean.dice, mean.iou,
                                        p.edge_f1.value_or(NAN), *p.rqs};
    csv << ',' << r.solution.m.wm << ',' << r.solution.m.gm << ',' << r.solution.m.csf;
    for (std::size_t k = 0; k < values.size(); ++k) {
      csv << ',';
      if (!std::isnan(values[k])) {
        csv << values[k];
        columns[metric_names[k]].push_back(values[k]);
      }
    }
    csv << ',' << r.trilinear.ssim << ',' << *r.trilinear.wm_gm_contrast << ','
        << r.synthesis.history.back().total << '\n';
    pairs.emplace_back(c.target.wg, *p.wm_gm_contrast);
  }
  write_text_atomic(dir / "cells.csv", csv.str());

  std::ostringstream summary_csv;
  summary_csv << "metric,n,mean,variance\n" << std::setprecision(17);
  json summary;
  summary["cells"] = cells.size();
  summary["failed"] = failures;
  for (const auto& name : metric_names) {
    const auto it = columns.find(name);
    if (it == columns.end()) continue;
    const auto st = sample_stats(it->second);
    summary["metrics"][name] = {{"n", it->second.size()}, {"mean", st[0]}, {"variance", st[1]}};
    summary_csv << name << ',' << it->second.size() << ',' << st[0] << ',' << st[1] << '\n';
  }
  // Least-squares line of achieved WM-GM contrast against the target.
  summary["pairs"] = json::array();
  for (const auto& [x, y] : pairs) summary["pairs"].push_back({{"target_wg", x}, {"achieved", y}});
  summary["fit"] = nullptr;
  if (pairs.size() >= 2) {
    double mx = 0, my = 0;
    for (const auto& [x, y] : pairs) mx += x, my += y;
    mx /= static_cast<double>(pairs.size());
    my /= static_cast<double>(pairs.size());
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& [x, y] : pairs) {
      sxx += (x - mx) * (x - mx);
      sxy += (x - mx) * (y - my);
      syy += (y - my) * (y - my);
    }
    if (sxx > 0) {
      const double slope = sxy / sxx;
      const double r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
      summary["fit"] = {{"slope", slope}, {"intercept", my - slope * mx}, {"r2", r2}, {"n", pairs.size()}};
    }
  }
  write_text_atomic(dir / "summary.csv", summary_csv.str());
  write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");

  json resolved = {{"phantom", config::to_json(s.phantom)}, {"phantom_seed", s.phantom_seed},
                   {"forward", config::to_json(s.forward)}, {"solver", config::to_json(s.solver)},
                   {"train", config::to_json(s.train)},     {"repeats", repeats},
                   {"seeds", seeds},                        {"targets", json::array()}};
  for (const auto& t : target_list) resolved["targets"].push_back(config::to_json(t));
  manifest.config = resolved;
  manifest.outputs = {{"cells", rel(dir / "cells.csv")},
                      {"summary_csv", rel(dir / "summary.csv")},
                      {"summary_json", rel(dir / "summary.json")}};
  manifest.write(dir / "sensitivity.manifest.json");

  out << cells.size() - failures.size() << " of " << cells.size() << " cells succeeded; wrote " << rel(dir) << '\n';
  return failures.size() == cells.size() ? kRuntimeFailure : kOk;
}

int dispatch_replay(const std::string& manifest_path, std::ostream& out, std::ostream& err) {
  const json j = read_json_file(manifest_path, "manifest");
  std::vector<std::string> args{"fieldsynth"};
  try {
    for (const auto& a : j.at("argv")) args.push_back(a.get<std::string>());
  } catch (const json::exception&) {
    throw FormatError("manifest has no argv list");
  }
  if (args.size() < 2 || args[1] == "replay") throw FormatError("manifest does not record a replayable command");
  const fs::path previous = fs::current_path();
  if (j.contains("cwd") && j["cwd"].is_string() && fs::is_directory(j["cwd"].get<std::string>()))
    fs::current_path(j["cwd"].get<std::string>());
  const int code = run(args, out, err);
  fs::current_path(previous);
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bidirectional high-field / ultra-low-field MRI synthesis", "fieldsynth"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FIELDSYNTH_VERSION);
  const std::vector<std::string> argv(args.begin() + (args.empty() ? 0 : 1), args.end());

  MakePhantomArgs mp;
  mp.common.argv = argv;
  auto* s_mp = app.add_subcommand("make-phantom", "Write a nested-ellipsoid phantom and its label map");
  add_common(s_mp, mp.common, "noise seed");
  s_mp->add_option("--out,-o", mp.out, "output volume (.nii)")->required();
  s_mp->add_option("--seg-out", mp.seg_out, "output label map (default <out>_seg.nii)");
  s_mp->add_option("--dims", mp.dims, "N or NX,NY,NZ (radii scale along)");
  mp.bg_opt = s_mp->add_option("--background-noise", mp.background_noise, "background noise std");
  mp.tissue_opt = s_mp->add_option("--tissue-noise", mp.tissue_noise, "tissue noise std");

  EstimateArgs ec;
  ec.common.argv = argv;
  auto* s_ec = app.add_subcommand("estimate-contrast", "Estimate the tissue degradation vector m");
  add_common(s_ec, ec.common, "unused; accepted for uniformity");
  s_ec->add_option("--hf", ec.hf, "high-field volume (.nii)")->required();
  s_ec->add_option("--masks", ec.masks, "label map (.nii) or box spec (.json)")->required();
  s_ec->add_option("--target", ec.target, "c_wc,c_wg,c_gc (default 2,12,17)");
  ec.eps_opt = s_ec->add_option("--epsilon", ec.epsilon, "ridge weight");
  ec.step_opt = s_ec->add_option("--grid-step", ec.grid_step, "lattice step");
  s_ec->add_option("--out,-o", ec.out, "output JSON");

  SimulateArgs su;
  su.common.argv = argv;
  auto* s_su = app.add_subcommand("simulate-ulf", "Degrade a high-field volume to ULF");
  add_common(s_su, su.common, "noise seed");
  s_su->add_option("--hf", su.hf, "high-field volume (.nii)")->required();
  s_su->add_option("--seg", su.seg, "label map (.nii)")->required();
  s_su->add_option("--m", su.m, "m_wm,m_gm,m_csf");
  s_su->add_option("--m-json", su.m_json, "JSON holding m (estimate-contrast output)");
  su.sigma_opt = s_su->add_option("--sigma", su.sigma, "smoothing sigma in voxels");
  su.df_opt = s_su->add_option("--df", su.df, "downsampling factor");
  su.rho_opt = s_su->add_option("--rho", su.rho, "Rician location");
  su.noise_opt = s_su->add_option("--noise-sigma", su.noise_sigma, "Rician scale");
  su.scale_opt = s_su->add_option("--scale", su.scale, "intensity scale of the noise model");
  s_su->add_option("--out,-o", su.out, "output volume (.nii)")->required();
  s_su->add_option("--seg-out", su.seg_out, "output label map (default <out>_seg.nii)");

  SynthArgs sh;
  sh.common.argv = argv;
  auto* s_sh = app.add_subcommand("synthesize-hf", "Fit the network to a ULF volume and write the HF prediction");
  add_common(s_sh, sh.common, "network and sampling seed");
  s_sh->add_option("--ulf", sh.ulf, "ULF volume (.nii)")->required();
  s_sh->add_option("--seg", sh.seg, "ULF label map (.nii)")->required();
  s_sh->add_option("--m", sh.m, "m_wm,m_gm,m_csf");
  s_sh->add_option("--m-json", sh.m_json, "JSON holding m");
  sh.iter_opt = s_sh->add_option("--iterations", sh.iterations, "optimizer steps");
  sh.lr_opt = s_sh->add_option("--lr", sh.lr, "Adam learning rate");
  sh.patch_opt = s_sh->add_option("--patch-size", sh.patch_size, "patch edge on the output grid");
  sh.patches_opt = s_sh->add_option("--patches", sh.patches, "patches per step");
  sh.df_opt = s_sh->add_option("--df,--factor", sh.df, "upsampling factor");
  sh.sigma_opt = s_sh->add_option("--sigma", sh.sigma, "smoothing sigma of the consistency path");
  sh.run_opt = s_sh->add_option("--run", sh.run, "patch-order stream");
  s_sh->add_option("--weights", sh.weights, "loss weights l1,l2,l3,l4 (mae,seg,tv,preact)");
  s_sh->add_option("--out-dir", sh.out_dir, "output directory");
  s_sh->add_option("--prefix", sh.prefix, "output file prefix");
  s_sh->add_option("--log-every", sh.log_every, "print losses every N steps to stderr");
  s_sh->add_option("--tune-lr", sh.tune_lr, "grid-search learning rates (comma list)");
  s_sh->add_option("--tune-tv", sh.tune_tv, "grid-search TV weights (comma list)");
  s_sh->add_option("--tune-iterations", sh.tune_iterations, "steps per grid-search trial");

  EvaluateArgs ev;
  ev.common.argv = argv;
  auto* s_ev = app.add_subcommand("evaluate", "Compare a prediction with a reference");
  s_ev->add_option("--pred", ev.pred, "predicted volume (.nii)")->required();
  s_ev->add_option("--ref", ev.ref, "reference volume (.nii)")->required();
  s_ev->add_option("--pred-seg", ev.pred_seg, "predicted label map (.nii)");
  s_ev->add_option("--ref-seg", ev.ref_seg, "reference label map (.nii)");
  s_ev->add_flag("--no-edges", ev.no_edges, "skip the Canny edge F1");
  s_ev->add_option("--canny-sigma", ev.canny.sigma, "Canny smoothing sigma");
  s_ev->add_option("--canny-low", ev.canny.low, "low hysteresis threshold");
  s_ev->add_option("--canny-high", ev.canny.high, "high hysteresis threshold");
  s_ev->add_option("--edge-tol", ev.edge_tol, "edge matching tolerance in pixels");
  s_ev->add_option("--out,-o", ev.out, "report JSON");
  s_ev->add_option("--csv", ev.csv, "report CSV (one row)");
  s_ev->add_option("--label", ev.label, "row label in the CSV");

  SensitivityArgs se;
  se.common.argv = argv;
  auto* s_se = app.add_subcommand("sensitivity", "Run the phantom pipeline over seeds and target contrasts");
  add_common(s_se, se.common, "training seed when --seeds is not given");
  s_se->add_option("--seeds", se.seeds, "training seeds (comma list)");
  se.repeats_opt = s_se->add_option("--repeats", se.repeats, "repeats per seed (patch order varies)");
  s_se->add_option("--c-wg", se.c_wg, "WM-GM target sweep (comma list)");
  s_se->add_option("--targets", se.targets, "explicit targets c_wc,c_wg,c_gc separated by ';'");
  se.iter_opt = s_se->add_option("--iterations", se.iterations, "optimizer steps per cell");
  s_se->add_option("--dims", se.dims, "phantom dims N or NX,NY,NZ (radii scale along)");
  s_se->add_option("--jobs", se.jobs, "cells run concurrently");
  s_se->add_flag("--no-edges", se.no_edges, "skip the Canny edge F1");
  s_se->add_option("--out-dir", se.out_dir, "output directory");

  std::string replay_path;
  auto* s_rp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  s_rp->add_option("manifest", replay_path, "manifest JSON")->required();

  try {
    std::vector<std::string> rev(argv.rbegin(), argv.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kBadInput;
  }

  try {
    if (s_mp->parsed()) return cmd_make_phantom(mp, out);
    if (s_ec->parsed()) return cmd_estimate_contrast(ec, out);
    if (s_su->parsed()) return cmd_simulate_ulf(su, out);
    if (s_sh->parsed()) return cmd_synthesize_hf(sh, out, err);
    if (s_ev->parsed()) return cmd_evaluate(ev, out);
    if (s_se->parsed()) return cmd_sensitivity(se, out, err);
    if (s_rp->parsed()) return dispatch_replay(replay_path, out, err);
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const UnsupportedError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const json::exception& e) {
    err << "error: bad JSON value: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kBadInput;
}

}  // namespace fieldsynth::cli
