// Builds a toy model with one planted anomaly, trains a Lite (ANE) detector
// and prints held-out metrics.

#include <iostream>

#include "hsf/hsf.hpp"

int main() {
  hsf::synth::ToyModelConfig cfg;
  cfg.seed = 1;
  cfg.anomalies = {{{3, hsf::LayerKind::Mlp}, 3.0}};
  const auto model = hsf::synth::build_toy_model(cfg);

  const auto train = hsf::synth::generate_corpus(model, 400, 400, 16, 11);
  const auto held = hsf::synth::generate_corpus(model, 100, 100, 16, 12);

  hsf::PipelineConfig pc;
  pc.feature_kind = hsf::FeatureKind::Ane;
  pc.ratios = {0.5, 0.5};
  const auto build = hsf::build_pipeline(train.normal, train.abnormal, pc);

  std::cout << "selected layers:";
  for (auto id : build.artifact.report.selected) std::cout << ' ' << hsf::to_string(id);
  std::cout << '\n';

  for (const auto* t : {&held.normal, &held.abnormal}) {
    const auto m = hsf::evaluate(build.artifact, *t);
    std::cout << (t == &held.normal ? "normal" : "abnormal") << " held-out accuracy "
              << m.accuracy << '\n';
  }
}
