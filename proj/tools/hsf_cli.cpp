// hsf: command-line front end for the hidden-state forensics pipeline.
//
//   hsf synth    toy-model corpus -> normal.hsft / abnormal.hsft
//   hsf analyze  critical-layer analysis -> report (JSON) + score table (CSV)
//   hsf train    full pipeline -> detector artifact (.hsfa)
//   hsf detect   artifact + trace -> verdicts CSV
//   hsf eval     artifact + labeled trace(s) -> metrics table
//   hsf report   active-neuron ratio study -> CSV
//
// Exit codes: 0 ok, 1 validation/usage error, 2 I/O or corruption error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hsf/hsf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// --- config file ------------------------------------------------------------

const std::set<std::string> kTopKeys = {"feature_kind", "theta",    "alpha",  "beta",
                                        "hidden",       "behavior", "train",  "normal",
                                        "abnormal",     "output",   "holdout", "split_seed"};
const std::set<std::string> kTrainKeys = {"learning_rate", "momentum",   "decay_factor", "decay_every",
                                          "epochs",        "batch_size", "seed"};

/// Values collected from defaults, then the config file, then explicit flags.
struct Settings {
  std::string feature = "ane";
  double theta = 0.2;
  double alpha = 0.25;
  double beta = 0.25;
  std::vector<std::size_t> hidden{256, 128, 64};
  std::string behavior = "abnormal";
  hsf::TrainConfig train;
  std::string normal, abnormal, output;
  double holdout = 0.0;
  std::uint64_t split_seed = 0;
};

void apply_config_file(const std::string& path, Settings& s) {
  std::ifstream in(path);
  if (!in) throw hsf::IoError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw hsf::ValidationError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw hsf::ValidationError("config file must hold a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!kTopKeys.count(k)) throw hsf::ValidationError("config file: unknown key '" + k + "'");
  }
  try {
    if (j.contains("feature_kind")) s.feature = j["feature_kind"].get<std::string>();
    if (j.contains("theta")) s.theta = j["theta"].get<double>();
    if (j.contains("alpha")) s.alpha = j["alpha"].get<double>();
    if (j.contains("beta")) s.beta = j["beta"].get<double>();
    if (j.contains("hidden")) s.hidden = j["hidden"].get<std::vector<std::size_t>>();
    if (j.contains("behavior")) s.behavior = j["behavior"].get<std::string>();
    if (j.contains("normal")) s.normal = j["normal"].get<std::string>();
    if (j.contains("abnormal")) s.abnormal = j["abnormal"].get<std::string>();
    if (j.contains("output")) s.output = j["output"].get<std::string>();
    if (j.contains("holdout")) s.holdout = j["holdout"].get<double>();
    if (j.contains("split_seed")) s.split_seed = j["split_seed"].get<std::uint64_t>();
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (!t.is_object()) throw hsf::ValidationError("config file: 'train' must be an object");
      for (const auto& [k, _] : t.items()) {
        if (!kTrainKeys.count(k)) throw hsf::ValidationError("config file: unknown key 'train." + k + "'");
      }
      if (t.contains("learning_rate")) s.train.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("momentum")) s.train.momentum = t["momentum"].get<double>();
      if (t.contains("decay_factor")) s.train.decay_factor = t["decay_factor"].get<double>();
      if (t.contains("decay_every")) s.train.decay_every = t["decay_every"].get<std::size_t>();
      if (t.contains("epochs")) s.train.epochs = t["epochs"].get<std::size_t>();
      if (t.contains("batch_size")) s.train.batch_size = t["batch_size"].get<std::size_t>();
      if (t.contains("seed")) s.train.seed = t["seed"].get<std::uint64_t>();
    }
  } catch (const json::exception& e) {
    throw hsf::ValidationError("config file: bad value: " + std::string(e.what()));
  }
}

hsf::PipelineConfig to_pipeline(const Settings& s) {
  hsf::PipelineConfig pc;
  pc.feature_kind = hsf::parse_feature_kind(s.feature);
  pc.theta = hsf::ActivationThreshold(s.theta);
  pc.ratios = hsf::SelectionRatios(s.alpha, s.beta);
  pc.train = s.train;
  if (s.hidden.size() != 3) throw hsf::ValidationError("--hidden needs exactly three widths");
  std::copy(s.hidden.begin(), s.hidden.end(), pc.hidden.begin());
  pc.behavior = s.behavior;
  pc.validate();
  return pc;
}

/// Registers the shared pipeline flags on a subcommand. Flags override the
/// config file, which overrides defaults; `overrides` is applied after the
/// config file is read.
struct PipelineFlags {
  Settings flags;
  std::string config;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app, bool with_training) {
    app->add_option("--config", config, "JSON config file (keys mirror the flags; flags win)");
    opts.push_back(app->add_option("--normal", flags.normal, "Normal-class trace (.hsft)"));
    opts.push_back(app->add_option("--abnormal", flags.abnormal, "Abnormal-class trace (.hsft)"));
    opts.push_back(app->add_option("--feature", flags.feature, "Feature kind: ane (Lite) or nas (Full)")
                       ->capture_default_str());
    opts.push_back(app->add_option("--theta", flags.theta, "Activation threshold for ANE")->capture_default_str());
    opts.push_back(app->add_option("--alpha", flags.alpha, "Attention selection ratio in [0,1]")->capture_default_str());
    opts.push_back(app->add_option("--beta", flags.beta, "MLP selection ratio in [0,1]")->capture_default_str());
    if (!with_training) return;
    opts.push_back(app->add_option("--hidden", flags.hidden, "Three hidden layer widths")
                       ->delimiter(',')
                       ->expected(3)
                       ->capture_default_str());
    opts.push_back(app->add_option("--lr", flags.train.learning_rate, "Initial learning rate")->capture_default_str());
    opts.push_back(app->add_option("--momentum", flags.train.momentum, "SGD momentum")->capture_default_str());
    opts.push_back(app->add_option("--decay", flags.train.decay_factor, "Learning-rate decay factor")
                       ->capture_default_str());
    opts.push_back(app->add_option("--decay-every", flags.train.decay_every, "Epochs between decays")
                       ->capture_default_str());
    opts.push_back(app->add_option("--epochs", flags.train.epochs, "Training epochs")->capture_default_str());
    opts.push_back(app->add_option("--batch", flags.train.batch_size, "Mini-batch size")->capture_default_str());
    opts.push_back(app->add_option("--seed", flags.train.seed, "Training seed")->capture_default_str());
    opts.push_back(app->add_option("--behavior", flags.behavior, "Behavior tag stored in the artifact")
                       ->capture_default_str());
    opts.push_back(app->add_option("--holdout", flags.holdout,
                                   "Fraction of each class held out (written next to the artifact)")
                       ->capture_default_str());
    opts.push_back(app->add_option("--split-seed", flags.split_seed, "Seed for the holdout split")
                       ->capture_default_str());
  }

  Settings resolve() const {
    Settings s;
    if (!config.empty()) apply_config_file(config, s);
    auto given = [&](const char* name) {
      for (auto* o : opts) {
        if (o->check_lname(name)) return o->count() > 0;
      }
      return false;
    };
    if (given("normal")) s.normal = flags.normal;
    if (given("abnormal")) s.abnormal = flags.abnormal;
    if (given("feature")) s.feature = flags.feature;
    if (given("theta")) s.theta = flags.theta;
    if (given("alpha")) s.alpha = flags.alpha;
    if (given("beta")) s.beta = flags.beta;
    if (given("hidden")) s.hidden = flags.hidden;
    if (given("lr")) s.train.learning_rate = flags.train.learning_rate;
    if (given("momentum")) s.train.momentum = flags.train.momentum;
    if (given("decay")) s.train.decay_factor = flags.train.decay_factor;
    if (given("decay-every")) s.train.decay_every = flags.train.decay_every;
    if (given("epochs")) s.train.epochs = flags.train.epochs;
    if (given("batch")) s.train.batch_size = flags.train.batch_size;
    if (given("seed")) s.train.seed = flags.train.seed;
    if (given("behavior")) s.behavior = flags.behavior;
    if (given("holdout")) s.holdout = flags.holdout;
    if (given("split-seed")) s.split_seed = flags.split_seed;
    if (s.normal.empty() || s.abnormal.empty()) {
      throw hsf::ValidationError("both --normal and --abnormal traces are required");
    }
    return s;
  }
};

// --- helpers ----------------------------------------------------------------

/// Concatenates traces that share a layer table; record ids are renumbered.
hsf::ActivationTrace concat_traces(const std::vector<std::string>& paths) {
  hsf::ActivationTrace out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    auto t = hsf::io::load_trace(paths[i]);
    if (i == 0) {
      out.header = t.header;
    } else if (!(t.header == out.header)) {
      throw hsf::ValidationError(paths[i] + ": header differs from " + paths[0]);
    }
    for (auto& r : t.records) out.records.push_back(std::move(r));
  }
  return out;
}

/// Seeded per-class split: returns (kept, held out).
std::pair<hsf::ActivationTrace, hsf::ActivationTrace> split_trace(const hsf::ActivationTrace& t,
                                                                  double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(t.records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  hsf::Rng rng(seed);
  rng.shuffle(idx);
  const auto n_hold = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size())));
  std::vector<bool> hold(idx.size(), false);
  for (std::size_t i = 0; i < n_hold; ++i) hold[idx[i]] = true;
  hsf::ActivationTrace keep{t.header, {}}, held{t.header, {}};
  for (std::size_t i = 0; i < t.records.size(); ++i) (hold[i] ? held : keep).records.push_back(t.records[i]);
  return {std::move(keep), std::move(held)};
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    hsf::io::write_text_atomic(path, text);
  }
}

hsf::synth::PlantedAnomaly parse_plant(const std::string& spec) {
  // block:kind:strength
  std::stringstream ss(spec);
  std::string block, kind, rho;
  if (!std::getline(ss, block, ':') || !std::getline(ss, kind, ':') || !std::getline(ss, rho)) {
    throw hsf::ValidationError("--plant expects block:kind:strength, got '" + spec + "'");
  }
  try {
    return {{static_cast<std::uint32_t>(std::stoul(block)), hsf::parse_layer_kind(kind)}, std::stod(rho)};
  } catch (const std::logic_error&) {
    throw hsf::ValidationError("--plant expects block:kind:strength, got '" + spec + "'");
  }
}

// --- subcommands ------------------------------------------------------------

struct SynthArgs {
  std::size_t normal = 400, abnormal = 400, seq_len = 16;
  std::uint64_t seed = 7;
  std::uint32_t blocks = 8, dim = 64, heads = 4, vocab = 64, expansion = 4;
  std::vector<std::string> plants{"3:mlp:5"};
  std::string aggregation = "last_token";
  std::string out = ".";
};

void run_synth(const SynthArgs& a) {
  hsf::synth::ToyModelConfig cfg;
  cfg.vocab_size = a.vocab;
  cfg.model_dim = a.dim;
  cfg.num_blocks = a.blocks;
  cfg.heads = a.heads;
  cfg.mlp_expansion = a.expansion;
  cfg.seed = a.seed;
  cfg.aggregation = hsf::parse_aggregation(a.aggregation);
  for (const auto& p : a.plants) cfg.anomalies.push_back(parse_plant(p));
  const auto model = hsf::synth::build_toy_model(cfg);
  const auto corpus = hsf::synth::generate_corpus(model, a.normal, a.abnormal, a.seq_len,
                                                  hsf::derive_seed(a.seed, 99));
  fs::create_directories(a.out);
  hsf::io::save_trace(fs::path(a.out) / "normal.hsft", corpus.normal);
  hsf::io::save_trace(fs::path(a.out) / "abnormal.hsft", corpus.abnormal);
  std::cout << "wrote " << corpus.normal.records.size() << " normal and " << corpus.abnormal.records.size()
            << " abnormal records to " << a.out << "\n";
}

void run_analyze(const PipelineFlags& f, const std::string& out, const std::string& csv) {
  const auto s = f.resolve();
  const auto pc = to_pipeline(s);
  const auto normal = hsf::io::load_trace(s.normal);
  const auto abnormal = hsf::io::load_trace(s.abnormal);
  const auto report = hsf::critical_layer_analysis(normal, abnormal, pc.feature_kind, pc.theta, pc.ratios);
  emit(out, hsf::to_json(report).dump(2) + "\n");
  if (!csv.empty()) {
    std::ostringstream os;
    os << "block,kind,score,rank,selected\n";
    const std::set<hsf::LayerId> selected(report.selected.begin(), report.selected.end());
    for (const auto* rank : {&report.rank_attn, &report.rank_mlp}) {
      for (std::size_t i = 0; i < rank->size(); ++i) {
        const auto id = (*rank)[i];
        os << id.block << ',' << hsf::to_string(id.kind) << ',' << fmt_double(report.scores.at(id)) << ','
           << i + 1 << ',' << (selected.count(id) ? 1 : 0) << '\n';
      }
    }
    hsf::io::write_text_atomic(csv, os.str());
  }
}

void run_train(const PipelineFlags& f, std::string out, bool deterministic) {
  auto s = f.resolve();
  if (out.empty()) out = s.output;
  if (out.empty()) throw hsf::ValidationError("train needs an output path (-o)");
  const auto pc = to_pipeline(s);
  auto normal = hsf::io::load_trace(s.normal);
  auto abnormal = hsf::io::load_trace(s.abnormal);
  if (!(s.holdout >= 0.0 && s.holdout < 1.0)) throw hsf::ValidationError("--holdout must be in [0, 1)");
  if (s.holdout > 0.0) {
    auto [nk, nh] = split_trace(normal, s.holdout, hsf::derive_seed(s.split_seed, 0));
    auto [ak, ah] = split_trace(abnormal, s.holdout, hsf::derive_seed(s.split_seed, 1));
    hsf::ActivationTrace held{normal.header, {}};
    std::uint64_t id = 0;
    for (auto* part : {&nh, &ah}) {
      for (auto r : part->records) {
        if (r.label == hsf::Label::Unlabeled) r.label = part == &nh ? hsf::Label::Normal : hsf::Label::Abnormal;
        r.record_id = id++;
        held.records.push_back(std::move(r));
      }
    }
    fs::path hold_path = fs::path(out);
    hold_path.replace_extension(".holdout.hsft");
    hsf::io::save_trace(hold_path, held);
    normal = std::move(nk);
    abnormal = std::move(ak);
    std::cout << "held out " << held.records.size() << " records -> " << hold_path.string() << "\n";
  }
  auto build = hsf::build_pipeline(normal, abnormal, pc);
  build.artifact.created = deterministic ? "" : timestamp();
  if (build.imbalance_warning) {
    std::cerr << "warning: class sizes differ by more than 2x (" << normal.records.size() << " normal vs "
              << abnormal.records.size() << " abnormal)\n";
  }
  hsf::io::save_artifact(out, build.artifact);
  std::cout << "trained " << hsf::to_string(pc.feature_kind) << " detector on " << build.artifact.report.selected.size()
            << " layers, input dim " << build.artifact.classifier.input_dim() << ", final loss "
            << build.history.loss.back() << ", train accuracy " << build.history.accuracy.back() << "\n";
}

void run_detect(const std::string& artifact, const std::string& trace_path, const std::string& out) {
  const auto art = hsf::io::load_artifact(artifact);
  const auto trace = hsf::io::load_trace(trace_path);
  const auto verdicts = hsf::detect_all(art, trace);
  std::ostringstream os;
  os << "record_id,label,p_abnormal\n";
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    os << trace.records[i].record_id << ',' << verdicts[i].label << ',' << fmt_double(verdicts[i].p_abnormal) << '\n';
  }
  emit(out, os.str());
}

void run_eval(const std::string& artifact, const std::vector<std::string>& traces, const std::string& out) {
  const auto art = hsf::io::load_artifact(artifact);
  const auto trace = concat_traces(traces);
  const auto m = hsf::evaluate(art, trace);
  std::ostringstream os;
  os << "metric,value\n"
     << "records," << m.total() << '\n'
     << "accuracy," << fmt_double(m.accuracy) << '\n'
     << "precision," << fmt_double(m.precision) << '\n'
     << "recall," << fmt_double(m.recall) << '\n'
     << "f1," << fmt_double(m.f1) << '\n'
     << "tp," << m.tp << '\n'
     << "fp," << m.fp << '\n'
     << "tn," << m.tn << '\n'
     << "fn," << m.fn << '\n';
  emit(out, os.str());
}

void run_report(const std::string& normal_path, const std::string& abnormal_path, double theta,
                double flag_factor, const std::string& out) {
  const auto normal = hsf::io::load_trace(normal_path);
  const auto abnormal = hsf::io::load_trace(abnormal_path);
  const auto rows = hsf::activation_ratio_report(normal, abnormal, hsf::ActivationThreshold(theta), flag_factor);
  std::ostringstream os;
  os << "block,kind,mean_count_normal,mean_count_abnormal,ratio,flagged\n";
  for (const auto& r : rows) {
    os << r.layer.block << ',' << hsf::to_string(r.layer.kind) << ',' << fmt_double(r.mean_count_normal) << ','
       << fmt_double(r.mean_count_abnormal) << ',' << fmt_double(r.ratio) << ',' << (r.flagged ? 1 : 0) << '\n';
  }
  emit(out, os.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hidden-state forensics: layer analysis, detector training and detection"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a toy-model corpus (normal.hsft, abnormal.hsft)");
  c_synth->add_option("--normal", synth.normal, "Normal record count")->capture_default_str();
  c_synth->add_option("--abnormal", synth.abnormal, "Abnormal record count")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Model and corpus seed")->capture_default_str();
  c_synth->add_option("--seq-len", synth.seq_len, "Tokens per input")->capture_default_str();
  c_synth->add_option("--blocks", synth.blocks, "Transformer blocks L")->capture_default_str();
  c_synth->add_option("--dim", synth.dim, "Hidden size d")->capture_default_str();
  c_synth->add_option("--heads", synth.heads, "Attention heads")->capture_default_str();
  c_synth->add_option("--vocab", synth.vocab, "Vocabulary size")->capture_default_str();
  c_synth->add_option("--expansion", synth.expansion, "MLP expansion factor")->capture_default_str();
  c_synth->add_option("--plant", synth.plants, "Planted anomaly block:kind:strength (repeatable)")
      ->capture_default_str();
  c_synth->add_option("--aggregation", synth.aggregation, "last_token or mean_pool")->capture_default_str();
  c_synth->add_option("-o,--out", synth.out, "Output directory")->capture_default_str();

  PipelineFlags analyze_flags;
  std::string analyze_out = "-", analyze_csv;
  auto* c_analyze = app.add_subcommand("analyze", "Critical-layer analysis");
  analyze_flags.add(c_analyze, false);
  c_analyze->add_option("-o,--out", analyze_out, "Report path (JSON), - for stdout")->capture_default_str();
  c_analyze->add_option("--csv", analyze_csv, "Per-layer score table (CSV)");

  PipelineFlags train_flags;
  std::string train_out;
  bool deterministic = false;
  auto* c_train = app.add_subcommand("train", "Select layers and train a detector artifact");
  train_flags.add(c_train, true);
  c_train->add_option("-o,--out", train_out, "Artifact path (.hsfa)");
  c_train->add_flag("--deterministic", deterministic, "Zero creation metadata for byte-identical output");

  std::string det_artifact, det_trace, det_out = "-";
  auto* c_detect = app.add_subcommand("detect", "Per-record verdicts");
  c_detect->add_option("--artifact", det_artifact, "Detector artifact (.hsfa)")->required();
  c_detect->add_option("--trace", det_trace, "Trace to classify (.hsft)")->required();
  c_detect->add_option("-o,--out", det_out, "Verdict CSV, - for stdout")->capture_default_str();

  std::string eval_artifact, eval_out = "-";
  std::vector<std::string> eval_traces;
  auto* c_eval = app.add_subcommand("eval", "Accuracy/precision/recall/F1 on labeled traces");
  c_eval->add_option("--artifact", eval_artifact, "Detector artifact (.hsfa)")->required();
  c_eval->add_option("--trace", eval_traces, "Labeled trace(s) (.hsft, repeatable)")->required();
  c_eval->add_option("-o,--out", eval_out, "Metrics CSV, - for stdout")->capture_default_str();

  std::string rep_normal, rep_abnormal, rep_out = "-";
  double rep_theta = 0.2, rep_flag = 2.0;
  auto* c_report = app.add_subcommand("report", "Active-neuron ratio per layer (CSV)");
  c_report->add_option("--normal", rep_normal, "Normal-class trace")->required();
  c_report->add_option("--abnormal", rep_abnormal, "Abnormal-class trace")->required();
  c_report->add_option("--theta", rep_theta, "Activation threshold")->capture_default_str();
  c_report->add_option("--flag-factor", rep_flag, "Flag layers with ratio >= f or <= 1/f")->capture_default_str();
  c_report->add_option("-o,--out", rep_out, "CSV path, - for stdout")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*c_synth) run_synth(synth);
    if (*c_analyze) run_analyze(analyze_flags, analyze_out, analyze_csv);
    if (*c_train) run_train(train_flags, train_out, deterministic);
    if (*c_detect) run_detect(det_artifact, det_trace, det_out);
    if (*c_eval) run_eval(eval_artifact, eval_traces, eval_out);
    if (*c_report) run_report(rep_normal, rep_abnormal, rep_theta, rep_flag, rep_out);
  } catch (const hsf::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.category() == hsf::Error::Category::Validation ? 1 : 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
