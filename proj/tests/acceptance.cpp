// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "hsf/hsf.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace hsf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- gradients ---------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0, weakest_mutation = 1e300;
  std::size_t mutations = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const MlpDims dims{1 + rng.below(16), 1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8), 2};
    auto m = init_mlp(dims, derive_seed(7, inst));
    // Nonzero biases keep pre-activations off the ReLU kink.
    for (auto& b : m.params.biases)
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.1 * rng.normal();
    const auto n = 1 + rng.below(8);
    Batch batch;
    batch.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dims[0]));
    for (Eigen::Index i = 0; i < batch.x.size(); ++i) batch.x.data()[i] = rng.normal();
    for (std::size_t i = 0; i < n; ++i) batch.labels.push_back(static_cast<int>(rng.below(2)));

    const auto analytic = loss_and_grad(m, batch).grad;
    const auto numeric = numeric_gradient(m, batch, 1e-5);
    worst = std::max(worst, max_relative_error(analytic, numeric));

    std::vector<double> flat;
    analytic.for_each([&](const double& v) { flat.push_back(v); });
    for (std::size_t target = 0; target < flat.size(); ++target) {
      if (std::abs(flat[target]) < 1e-6) continue;  // doubling ~0 is not a measurable change
      auto bad = analytic;
      std::size_t i = 0;
      bad.for_each([&](double& v) {
        if (i++ == target) v *= 2.0;
      });
      weakest_mutation = std::min(weakest_mutation, max_relative_error(bad, numeric));
      ++mutations;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && weakest_mutation > 0.3 && mutations > 0 && secs < 10.0,
          "max rel err " + fmt("%.2e", worst) + ", weakest mutation " + fmt("%.3f", weakest_mutation) +
              " over " + std::to_string(mutations) + " entries, " + fmt("%.2f s", secs)};
}

// --- cosine and ANE ----------------------------------------------------------

Outcome cosine_ane_oracles() {
  const auto t0 = Clock::now();
  Rng rng(99);
  double worst = 0.0;
  std::size_t degenerate = 0, ane_mismatch = 0;
  for (int c = 0; c < 10000; ++c) {
    const auto n = 1 + rng.below(512);
    std::vector<double> u(n), v(n);
    const double su = std::pow(10.0, rng.uniform(-8, 8)), sv = std::pow(10.0, rng.uniform(-8, 8));
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = rng.normal() * su;
      v[i] = rng.normal() * sv;
    }
    switch (c % 10) {
      case 0: std::fill(u.begin(), u.end(), 0.0); ++degenerate; break;
      case 1: std::fill(v.begin(), v.end(), 0.0); ++degenerate; break;
      case 2: std::fill(u.begin(), u.end(), 0.0); std::fill(v.begin(), v.end(), 0.0); ++degenerate; break;
      case 3: for (std::size_t i = 0; i < n; ++i) v[i] = u[i] * 3.5 + 1e-9 * u[i] * rng.normal(); break;
      case 4: for (std::size_t i = 0; i < n; ++i) v[i] = -u[i]; break;
      default: break;
    }
    const double got = cosine_similarity(u, v), ref = oracle::cosine(u, v);
    const double err = ref == 0.0 ? std::abs(got) : std::abs(got - ref) / std::abs(ref);
    worst = std::max(worst, err);
  }
  for (int c = 0; c < 10000; ++c) {
    const auto n = 1 + rng.below(256);
    std::vector<float> a(n);
    for (auto& x : a) x = static_cast<float>(rng.normal());
    double theta = rng.uniform(-1.5, 1.5);
    if (c % 4 == 0) theta = a[rng.below(n)];  // exact ties
    if (c % 7 == 0) a[0] = static_cast<float>(theta);
    std::size_t naive = 0;
    for (float x : a) {
      if (static_cast<double>(x) > theta) ++naive;
    }
    const auto rec = hsf::testing::make_record(0, Label::Unlabeled, {{{0, LayerKind::Mlp}, a}});
    const std::vector<LayerId> layers{{0, LayerKind::Mlp}};
    const auto f = extract_ane(rec, layers, ActivationThreshold(theta));
    if (f.values.size() != 1 || f.values[0] != static_cast<double>(naive)) ++ane_mismatch;
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && ane_mismatch == 0 && secs < 5.0,
          "cosine max rel err " + fmt("%.2e", worst) + " (" + std::to_string(degenerate) +
              " degenerate), ANE mismatches " + std::to_string(ane_mismatch) + ", " + fmt("%.2f s", secs)};
}

// --- critical-layer recovery -------------------------------------------------

synth::Corpus toy_corpus(std::uint64_t seed, std::vector<synth::PlantedAnomaly> plants, std::size_t n,
                         std::size_t seq_len = 16) {
  synth::ToyModelConfig c;
  c.seed = seed;
  c.anomalies = std::move(plants);
  return synth::generate_corpus(synth::build_toy_model(c), n, n, seq_len, derive_seed(seed, 99));
}

Outcome layer_recovery() {
  const auto t0 = Clock::now();
  const LayerId planted{3, LayerKind::Mlp};
  int rank1 = 0, overlap_ok = 0;
  std::string overlaps;
  const std::vector<LayerId> set{{2, LayerKind::Attention}, {6, LayerKind::Attention},
                                 {0, LayerKind::Mlp}, {4, LayerKind::Mlp}};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto single = toy_corpus(seed, {{planted, 5.0}}, 200);
    bool ok = true;
    for (auto kind : {FeatureKind::Nas, FeatureKind::Ane}) {
      const auto r = critical_layer_analysis(single.normal, single.abnormal, kind, ActivationThreshold(0.2), {0.25, 0.25});
      ok = ok && r.rank_mlp.front() == planted;
    }
    rank1 += ok;

    std::vector<synth::PlantedAnomaly> plants;
    for (auto id : set) plants.push_back({id, 5.0});
    const auto multi = toy_corpus(seed, plants, 200);
    const auto r = critical_layer_analysis(multi.normal, multi.abnormal, FeatureKind::Nas, ActivationThreshold(0.2), {0.25, 0.25});
    int hit = 0;
    for (auto id : r.selected) hit += std::count(set.begin(), set.end(), id) > 0;
    overlap_ok += hit >= 3;
    overlaps += std::to_string(hit);
  }
  const double secs = seconds_since(t0);
  return {rank1 == 10 && overlap_ok >= 8,
          "single layer rank 1 in " + std::to_string(rank1) + "/10 seeds (NAS and ANE); 4-layer overlap>=3 in " +
              std::to_string(overlap_ok) + "/10 [" + overlaps + "], " + fmt("%.1f s", secs)};
}

// --- end-to-end detection ----------------------------------------------------

struct Split {
  ActivationTrace train_n, train_a, held;
};

Split split_corpus(const synth::Corpus& c, std::size_t n_train) {
  Split s{{c.normal.header, {}}, {c.normal.header, {}}, {c.normal.header, {}}};
  for (std::size_t i = 0; i < c.normal.records.size(); ++i)
    (i < n_train ? s.train_n : s.held).records.push_back(c.normal.records[i]);
  for (std::size_t i = 0; i < c.abnormal.records.size(); ++i)
    (i < n_train ? s.train_a : s.held).records.push_back(c.abnormal.records[i]);
  return s;
}

Outcome end_to_end() {
  const auto t0 = Clock::now();
  const std::vector<synth::PlantedAnomaly> plants{{{2, LayerKind::Attention}, 3.0}, {{5, LayerKind::Mlp}, 3.0}};
  const auto signal = split_corpus(toy_corpus(11, plants, 500), 400);
  auto null_plants = plants;
  for (auto& p : null_plants) p.strength = 0.0;
  const auto noise = split_corpus(toy_corpus(11, null_plants, 500), 400);

  bool ok = true;
  std::string detail;
  for (auto kind : {FeatureKind::Ane, FeatureKind::Nas}) {
    PipelineConfig cfg;
    cfg.feature_kind = kind;
    cfg.train.seed = 5;
    const auto art = build_pipeline(signal.train_n, signal.train_a, cfg).artifact;
    const auto m = evaluate(art, signal.held);
    const auto art0 = build_pipeline(noise.train_n, noise.train_a, cfg).artifact;
    const auto m0 = evaluate(art0, noise.held);
    ok = ok && m.accuracy >= 0.95 && m.f1 >= 0.95 && m0.accuracy >= 0.40 && m0.accuracy <= 0.60;
    detail += std::string(to_string(kind)) + " acc " + fmt("%.3f", m.accuracy) + " f1 " + fmt("%.3f", m.f1) +
              " (rho=0 acc " + fmt("%.3f", m0.accuracy) + "); ";
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 60.0, detail + fmt("%.1f s", secs)};
}

// --- throughput --------------------------------------------------------------

Outcome throughput() {
  const auto c = toy_corpus(3, {{{3, LayerKind::Mlp}, 3.0}}, 500);
  ActivationTrace batch{c.normal.header, c.normal.records};
  batch.records.insert(batch.records.end(), c.abnormal.records.begin(), c.abnormal.records.end());
  bool ok = true;
  std::string detail;
  for (auto kind : {FeatureKind::Ane, FeatureKind::Nas}) {
    PipelineConfig cfg;
    cfg.feature_kind = kind;
    cfg.train.epochs = 2;  // timing covers inference only
    const auto art = build_pipeline(c.normal, c.abnormal, cfg).artifact;
    const auto t0 = Clock::now();
    std::size_t flagged = 0;
    for (const auto& rec : batch.records) flagged += detect(art, batch.header, rec).label;
    const double secs = seconds_since(t0);
    const double limit = kind == FeatureKind::Ane ? 1.0 : 2.0;
    ok = ok && secs < limit && batch.records.size() == 1000;
    detail += std::string(kind == FeatureKind::Ane ? "lite" : "full") + " " + fmt("%.4f s", secs) + " (limit " +
              fmt("%.0f s", limit) + ", " + std::to_string(flagged) + " flagged); ";
  }
  return {ok, detail + "1000 records, single thread"};
}

// --- determinism and round trip ----------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HSF_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto t0 = Clock::now();
  const auto root = fs::temp_directory_path() / ("hsf_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<std::string> outputs{"corpus/normal.hsft", "corpus/abnormal.hsft", "det.hsfa",
                                         "det.holdout.hsft",   "verdicts.csv",         "scores.csv",
                                         "ratio.csv",          "metrics.csv"};
  int failures = 0;
  for (const char* run : {"a", "b"}) {
    const auto d = root / run;
    fs::create_directories(d);
    const auto P = [&](const std::string& s) { return (d / s).string(); };
    failures += run_cli("synth --normal 120 --abnormal 120 --seed 3 --plant 2:attention:3 --plant 5:mlp:3 -o " + P("corpus")) != 0;
    const std::string traces = " --normal " + P("corpus/normal.hsft") + " --abnormal " + P("corpus/abnormal.hsft");
    failures += run_cli("analyze" + traces + " -o " + P("report.json") + " --csv " + P("scores.csv")) != 0;
    failures += run_cli("train" + traces + " --epochs 20 --holdout 0.2 --deterministic -o " + P("det.hsfa")) != 0;
    failures += run_cli("detect --artifact " + P("det.hsfa") + " --trace " + P("det.holdout.hsft") + " -o " + P("verdicts.csv")) != 0;
    failures += run_cli("eval --artifact " + P("det.hsfa") + " --trace " + P("det.holdout.hsft") + " -o " + P("metrics.csv")) != 0;
    failures += run_cli("report" + traces + " -o " + P("ratio.csv")) != 0;
  }
  std::size_t identical = 0;
  for (const auto& o : outputs) {
    const auto a = slurp(root / "a" / o), b = slurp(root / "b" / o);
    identical += !a.empty() && a == b;
  }

  std::size_t roundtrips = 0, flips = 0, undetected = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t = hsf::testing::random_trace(1000 + seed, 4, 9, 12);
    const auto bytes = hsf::testing::to_bytes(t);
    roundtrips += bitwise_equal(hsf::testing::from_bytes(bytes), t);
    if (seed % 10 != 0) continue;
    // Record region plus trailing checksum; the checksum covers record bytes only.
    std::uint32_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 6, 4);
    const std::size_t region_start = 4 + 2 + 4 + header_len + 8;
    for (std::size_t pos = region_start; pos < bytes.size(); ++pos) {
      auto bad = bytes;
      bad[pos] = static_cast<char>(bad[pos] ^ (1u << (pos % 8)));
      ++flips;
      try {
        hsf::testing::from_bytes(bad);
        ++undetected;
      } catch (const hsf::Error&) {
      }
    }
  }
  fs::remove_all(root);
  const double secs = seconds_since(t0);
  return {failures == 0 && identical == outputs.size() && roundtrips == 100 && undetected == 0,
          std::to_string(identical) + "/" + std::to_string(outputs.size()) + " outputs byte-identical, " +
              std::to_string(roundtrips) + "/100 round trips, " + std::to_string(flips - undetected) + "/" +
              std::to_string(flips) + " record-region byte flips detected, " + fmt("%.1f s", secs)};
}

// --- selection arithmetic ----------------------------------------------------

Outcome selection_arithmetic() {
  const std::pair<double, double> grid[] = {{1, 0}, {0, 1}, {0.5, 0.5}, {0.25, 0.25}, {0.125, 0.125}};
  Rng rng(4);
  std::size_t checked = 0, wrong = 0;
  std::string counts;
  for (std::uint32_t blocks : {4u, 8u, 32u}) {
    for (auto [alpha, beta] : grid) {
      LayerScores s;
      for (std::uint32_t b = 0; b < blocks; ++b) {
        s[{b, LayerKind::Attention}] = rng.uniform(-1, 1);
        s[{b, LayerKind::Mlp}] = rng.uniform(-1, 1);
      }
      const auto sel = rank_and_select(s, {alpha, beta}, blocks);
      auto floor_clamp = [&](double r) -> std::size_t {
        if (r == 0.0) return 0;
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(r * blocks)));
      };
      const std::size_t na = std::count_if(sel.selected.begin(), sel.selected.end(),
                                           [](LayerId id) { return id.kind == LayerKind::Attention; });
      const std::size_t nm = sel.selected.size() - na;
      ++checked;
      if (na != floor_clamp(alpha) || nm != floor_clamp(beta) ||
          sel.selected != oracle::select_prefix(s, alpha, beta, blocks)) {
        ++wrong;
      }
      if (blocks == 32) counts += std::to_string(na) + "+" + std::to_string(nm) + " ";
    }
  }
  return {wrong == 0, std::to_string(checked - wrong) + "/" + std::to_string(checked) +
                          " (L, alpha, beta) cases match; L=32 counts: " + counts};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {"gradient oracle", gradient_oracle},
      {"cosine and ANE oracles", cosine_ane_oracles},
      {"critical-layer recovery", layer_recovery},
      {"end-to-end detection", end_to_end},
      {"throughput", throughput},
      {"determinism and round trip", determinism},
      {"selection arithmetic", selection_arithmetic},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : std::string("acceptance: all criteria passed"))
            << std::endl;
  return failed ? 1 : 0;
}
