#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "fieldsynth/cli.hpp"
#include "fieldsynth/contrast.hpp"
#include "fieldsynth/metrics.hpp"
#include "fieldsynth/nifti.hpp"
#include "support.hpp"

using namespace fieldsynth;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "fieldsynth");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  return {std::istreambuf_iterator<char>(f), {}};
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

void write_text(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

// Small network and patches so training commands finish in seconds.
constexpr const char* kTinyConfig = R"({
  "train": {"patch_size": 8, "batch_patches": 1, "network": {"hidden_layers": 1, "width": 16}}
})";

struct Fixture {
  testing::TempDir dir{"cli"};
  std::string hf = (dir / "hf.nii").string();
  std::string seg = (dir / "hf_seg.nii").string();
  std::string tiny = (dir / "tiny.json").string();

  Fixture() {
    REQUIRE(run({"make-phantom", "-o", hf, "--dims", "24", "--background-noise", "0.01", "--tissue-noise", "0.02",
                 "--seed", "3"}).code == 0);
    write_text(tiny, kTinyConfig);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("argument errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"no-such-command"}).code == 2);
  CHECK(run({"make-phantom"}).code == 2);
  CHECK(run({"make-phantom", "-o", "/tmp/x.nii", "--dims", "0"}).code == 2);
  CHECK(run({"make-phantom", "-o", "/tmp/x.nii", "--dims", "4,4"}).code == 2);
  CHECK(run({"--help"}).code == 0);
  const auto version = run({"--version"});
  CHECK(version.code == 0);
  CHECK_FALSE(version.out.empty());
}

TEST_CASE("make-phantom writes volume, labels and manifest") {
  Fixture f;
  const auto v = load_nifti(f.hf).volume;
  CHECK(v.dims() == Dims{24, 24, 24});
  const auto labels = Segmentation::from_label_volume(load_nifti(f.seg).volume);
  for (Tissue t : kTissues) CHECK(labels.count(t) > 0);
  const json m = read_json(f.path("hf.manifest.json"));
  CHECK(m["command"] == "make-phantom");
  CHECK(m["seed"] == 3);
  CHECK(m["config"]["phantom"]["dims"] == json::array({24, 24, 24}));
}

TEST_CASE("estimate-contrast reports a missing mask") {
  Fixture f;
  const auto r = run({"estimate-contrast", "--hf", f.hf, "--masks", f.path("absent.nii")});
  CHECK(r.code == 2);
  CHECK(r.err.find("mask not found") != std::string::npos);
  CHECK(run({"estimate-contrast", "--hf", f.path("absent.nii"), "--masks", f.seg}).code == 2);
  CHECK(run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "--target", "1,2"}).code == 2);
  CHECK(run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "--grid-step", "0.7"}).code == 2);
}

TEST_CASE("estimate-contrast matches the module") {
  Fixture f;
  const std::string out = f.path("m.json");
  const auto r = run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "--target", "2,12,17", "-o", out});
  REQUIRE(r.code == 0);
  const json j = read_json(out);
  CHECK(j == json::parse(r.out));

  const Volume hf = load_nifti(f.hf).volume;
  const auto masks = RoiMasks::from_segmentation(Segmentation::from_label_volume(load_nifti(f.seg).volume));
  const SnrTriple snr = estimate_snr(hf, masks);
  const SolverResult sol = estimate_m(snr, {2, 12, 17}, SolverConfig{});
  CHECK(j["m"]["wm"].get<double>() == sol.m.wm);
  CHECK(j["m"]["gm"].get<double>() == sol.m.gm);
  CHECK(j["m"]["csf"].get<double>() == sol.m.csf);
  CHECK(j["objective"].get<double>() == sol.objective);
  CHECK(j["snr"]["wm"].get<double>() == snr.wm);
  CHECK(j["A"][1][1].get<double>() == -snr.gm);
  CHECK(std::filesystem::exists(f.path("m.manifest.json")));

  // Box masks select the same statistics through a JSON spec.
  write_text(f.path("boxes.json"), R"({"wm": [11, 13, 11, 13, 11, 13], "gm": [11, 13, 11, 13, 2, 4],
                                      "csf": [11, 13, 11, 13, 1, 2], "bg": [[0, 24, 0, 24, 0, 1], [0, 1, 0, 24, 1, 24]]})");
  CHECK(run({"estimate-contrast", "--hf", f.hf, "--masks", f.path("boxes.json")}).code == 0);
  write_text(f.path("badbox.json"), R"({"wm": [0, 30, 0, 1, 0, 1]})");
  CHECK(run({"estimate-contrast", "--hf", f.hf, "--masks", f.path("badbox.json")}).code == 2);
}

TEST_CASE("estimate-contrast recovers ones on a consistent target without the ridge") {
  Fixture f;
  const Volume hf = load_nifti(f.hf).volume;
  const auto masks = RoiMasks::from_segmentation(Segmentation::from_label_volume(load_nifti(f.seg).volume));
  const auto c = apply(build_contrast_system(estimate_snr(hf, masks)), {1, 1, 1});
  std::ostringstream target;
  target.precision(17);
  target << c[0] << ',' << c[1] << ',' << c[2];
  const auto r = run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "--target", target.str(), "--epsilon", "0"});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  for (const char* k : {"wm", "gm", "csf"}) CHECK(j["m"][k].get<double>() == doctest::Approx(1.0).epsilon(1e-3));

  // The system has a null direction (1/snr_wm, 1/snr_gm, 1/snr_csf); a ridge
  // slides the minimizer along it while the fit stays exact up to rounding.
  const auto ridge = run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "--target", target.str()});
  REQUIRE(ridge.code == 0);
  const json k = json::parse(ridge.out);
  CHECK(k["m"]["csf"].get<double>() < 0.5);
  CHECK(k["objective"].get<double>() < 1e-2);
}

TEST_CASE("simulate-ulf halves dims and is deterministic per seed") {
  Fixture f;
  const std::string a = f.path("a.nii"), b = f.path("b.nii"), c = f.path("c.nii");
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "0.7,0.5,0.3", "-o", a, "--seed", "5"}).code == 0);
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "0.7,0.5,0.3", "-o", b, "--seed", "5"}).code == 0);
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "0.7,0.5,0.3", "-o", c, "--seed", "6"}).code == 0);
  CHECK(load_nifti(a).volume.dims() == Dims{12, 12, 12});
  CHECK(load_nifti(f.path("a_seg.nii")).volume.dims() == Dims{12, 12, 12});
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(f.path("a_seg.nii")) == slurp(f.path("b_seg.nii")));
  CHECK(slurp(a) != slurp(c));
  const json m = read_json(f.path("a.manifest.json"));
  CHECK(m["config"]["forward"]["df"] == 2);
  CHECK(m["seed"] == 5);

  // m from an estimate-contrast result.
  REQUIRE(run({"estimate-contrast", "--hf", f.hf, "--masks", f.seg, "-o", f.path("m.json")}).code == 0);
  CHECK(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m-json", f.path("m.json"), "-o", f.path("d.nii")}).code ==
        0);
}

TEST_CASE("simulate-ulf identity settings return the tissue-masked input") {
  Fixture f;
  const std::string out = f.path("id.nii");
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "1,1,1", "--noise-sigma", "0", "--rho", "0", "--df",
               "1", "--sigma", "0", "-o", out})
              .code == 0);
  const Volume hf = load_nifti(f.hf).volume, ulf = load_nifti(out).volume;
  const auto labels = Segmentation::from_label_volume(load_nifti(f.seg).volume);
  REQUIRE(ulf.dims() == hf.dims());
  for (std::size_t i = 0; i < hf.size(); ++i) {
    const double expect = labels.label(i) == 0 ? 0.0 : hf[i];
    CHECK(ulf[i] == doctest::Approx(expect).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("simulate-ulf input errors") {
  Fixture f;
  CHECK(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "-o", f.path("x.nii")}).code == 2);
  CHECK(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "1.5,1,1", "-o", f.path("x.nii")}).code == 2);
  CHECK(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "1,1,1", "--df", "0", "-o", f.path("x.nii")}).code ==
        2);
  REQUIRE(run({"make-phantom", "-o", f.path("small.nii"), "--dims", "12"}).code == 0);
  CHECK(run({"simulate-ulf", "--hf", f.hf, "--seg", f.path("small_seg.nii"), "--m", "1,1,1", "-o", f.path("x.nii")})
            .code == 2);
  write_text(f.path("broken.json"), "{");
  CHECK(run({"simulate-ulf", "--config", f.path("broken.json"), "--hf", f.hf, "--seg", f.seg, "--m", "1,1,1", "-o",
             f.path("x.nii")})
            .code == 2);
  write_text(f.path("unknown.json"), R"({"colour": 1})");
  CHECK(run({"simulate-ulf", "--config", f.path("unknown.json"), "--hf", f.hf, "--seg", f.seg, "--m", "1,1,1", "-o",
             f.path("x.nii")})
            .code == 2);
}

TEST_CASE("synthesize-hf doubles dims, is deterministic and replays bit-exactly") {
  Fixture f;
  const std::string ulf = f.path("ulf.nii"), ulf_seg = f.path("ulf_seg.nii");
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "0.7,0.5,0.3", "-o", ulf}).code == 0);
  auto synth = [&](const std::string& dir) {
    return run({"synthesize-hf", "--config", f.tiny, "--ulf", ulf, "--seg", ulf_seg, "--m", "0.7,0.5,0.3",
                "--iterations", "4", "--seed", "2", "--out-dir", f.path(dir)});
  };
  REQUIRE(synth("s1").code == 0);
  REQUIRE(synth("s2").code == 0);
  const auto out = [&](const std::string& dir, const std::string& name) { return f.dir / dir / name; };
  CHECK(load_nifti(out("s1", "hf.nii")).volume.dims() == Dims{24, 24, 24});
  CHECK(load_nifti(out("s1", "hf_seg.nii")).volume.dims() == Dims{24, 24, 24});
  for (const char* name : {"hf.nii", "hf_seg.nii", "hf_prob_wm.nii", "hf_loss.csv", "hf.ckpt", "hf.json"})
    CHECK(slurp(out("s1", name)) == slurp(out("s2", name)));

  const std::string loss = slurp(out("s1", "hf_loss.csv"));
  CHECK(loss.rfind("iteration,total,mae,seg,tv,preact\n", 0) == 0);
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 5);

  const json manifest = read_json(out("s1", "hf.manifest.json"));
  CHECK(manifest["config"]["train"]["patch_size"] == 8);
  CHECK(manifest["config"]["train"]["iterations"] == 4);
  const std::string before = slurp(out("s1", "hf.nii"));
  std::filesystem::remove(out("s1", "hf.nii"));
  REQUIRE(run({"replay", out("s1", "hf.manifest.json").string()}).code == 0);
  CHECK(slurp(out("s1", "hf.nii")) == before);

  // Patch larger than the output grid.
  CHECK(run({"synthesize-hf", "--ulf", ulf, "--seg", ulf_seg, "--m", "0.7,0.5,0.3", "--patch-size", "32",
             "--iterations", "1", "--out-dir", f.path("s3")})
            .code == 2);
}

TEST_CASE("synthesize-hf divergence exits 1 and keeps the loss history") {
  Fixture f;
  const std::string ulf = f.path("ulf.nii"), ulf_seg = f.path("ulf_seg.nii");
  REQUIRE(run({"simulate-ulf", "--hf", f.hf, "--seg", f.seg, "--m", "0.7,0.5,0.3", "-o", ulf}).code == 0);
  const auto r = run({"synthesize-hf", "--config", f.tiny, "--ulf", ulf, "--seg", ulf_seg, "--m", "0.7,0.5,0.3",
                      "--iterations", "50", "--lr", "1e30", "--weights", "1,1,0.1,1e30", "--out-dir", f.path("dv")});
  CHECK(r.code == 1);
  CHECK(std::filesystem::exists(f.dir / "dv" / "hf_loss.csv"));
  CHECK_FALSE(std::filesystem::exists(f.dir / "dv" / "hf.nii"));
}

TEST_CASE("evaluate on the volume itself and partial reports") {
  Fixture f;
  const std::string out = f.path("self.json"), csv = f.path("self.csv");
  REQUIRE(run({"evaluate", "--pred", f.hf, "--ref", f.hf, "--pred-seg", f.seg, "--ref-seg", f.seg, "-o", out, "--csv",
               csv})
              .code == 0);
  const json j = read_json(out);
  CHECK(j["ssim"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(j["mslc"].get<double>()) < 1e-12);
  CHECK(j["dice"]["wm"] == 1.0);
  CHECK(j["edge_f1"] == 1.0);
  CHECK(j["rqs"].get<double>() == doctest::Approx(1.0));
  const std::string text = slurp(csv);
  CHECK(text.rfind(metrics::MetricReport::csv_header() + "\n", 0) == 0);

  const auto partial = run({"evaluate", "--pred", f.hf, "--ref", f.hf, "-o", f.path("p.json")});
  CHECK(partial.code == 0);
  const json p = read_json(f.path("p.json"));
  CHECK(p["dice"].is_null());
  CHECK(p["wm_gm_contrast"].is_null());
  CHECK(p["rqs"].is_null());

  REQUIRE(run({"make-phantom", "-o", f.path("small.nii"), "--dims", "12"}).code == 0);
  CHECK(run({"evaluate", "--pred", f.path("small.nii"), "--ref", f.hf}).code == 2);
  CHECK(run({"evaluate", "--pred", f.path("none.nii"), "--ref", f.hf}).code == 2);
}

TEST_CASE("evaluate matches module-level metrics") {
  Fixture f;
  REQUIRE(run({"make-phantom", "-o", f.path("noisy.nii"), "--dims", "24", "--tissue-noise", "0.05", "--seed", "8"})
              .code == 0);
  REQUIRE(run({"evaluate", "--pred", f.path("noisy.nii"), "--ref", f.hf, "--ref-seg", f.seg, "-o", f.path("r.json")})
              .code == 0);
  const json j = read_json(f.path("r.json"));
  const Volume pred = load_nifti(f.path("noisy.nii")).volume, ref = load_nifti(f.hf).volume;
  const auto seg = Segmentation::from_label_volume(load_nifti(f.seg).volume);
  CHECK(j["ssim"].get<double>() == metrics::ssim(pred, ref));
  CHECK(j["mslc"].get<double>() == metrics::mslc(pred, ref));
  CHECK(j["wm_gm_contrast"].get<double>() == metrics::wm_gm_contrast(pred, seg));
  CHECK(j["edge_f1"].get<double>() == metrics::edge_f1(pred, ref));
}

TEST_CASE("sensitivity bookkeeping at toy scale") {
  Fixture f;
  const std::string out = f.path("sens");
  const std::vector<std::string> base = {"sensitivity", "--config", f.tiny,     "--dims",     "16",
                                         "--iterations", "2",      "--no-edges", "--out-dir", out};
  auto args = base;
  args.insert(args.end(), {"--seeds", "1,2,3", "--repeats", "2"});
  const auto r = run(args);
  REQUIRE(r.code == 0);
  const std::string cells = slurp(std::filesystem::path(out) / "cells.csv");
  CHECK(std::count(cells.begin(), cells.end(), '\n') == 7);
  const json summary = read_json(std::filesystem::path(out) / "summary.json");
  CHECK(summary["cells"] == 6);
  CHECK(summary["failed"].empty());
  CHECK(summary["metrics"]["ssim"]["n"] == 6);
  CHECK(summary["metrics"]["ssim"]["variance"].get<double>() >= 0.0);
  CHECK_FALSE(summary["metrics"].contains("edge_f1"));

  // Parallel cells give the same table.
  auto par = args;
  par.insert(par.end(), {"--jobs", "3"});
  par[9] = f.path("sens_par");
  REQUIRE(run(par).code == 0);
  CHECK(slurp(std::filesystem::path(f.path("sens_par")) / "cells.csv") == cells);

  auto sweep = base;
  sweep[9] = f.path("sweep");
  sweep.insert(sweep.end(), {"--c-wg", "5,10,15,20"});
  REQUIRE(run(sweep).code == 0);
  const json s = read_json(std::filesystem::path(f.path("sweep")) / "summary.json");
  CHECK(s["pairs"].size() == 4);
  CHECK(s["pairs"][0]["target_wg"] == 5.0);
  CHECK(s["fit"].contains("slope"));
  CHECK(s["fit"]["r2"].get<double>() >= 0.0);
  CHECK(s["fit"]["r2"].get<double>() <= 1.0);

  auto bad = base;
  bad.insert(bad.end(), {"--seeds", "1.5"});
  CHECK(run(bad).code == 2);
}
