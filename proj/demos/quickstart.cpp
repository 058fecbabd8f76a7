// SPDX-License-Identifier: Apache-2.0
//
// Renders a small synthetic sphere, builds observation maps, trains a few
// epochs and prints the mean angular error before and after.

#include <cstdio>

#include "efps/obsmap.hpp"
#include "efps/synthgen.hpp"
#include "efps/train.hpp"

int main() {
  using namespace efps;
  synth::SceneSpec scene;
  scene.width = scene.height = 32;
  const obsmap::Capture cap = synth::generate_capture(scene, 32, synth::EventSimConfig{});
  std::printf("rendered %zu frames, simulated %zu events\n", cap.frames.size(), cap.events.events.size());

  obsmap::SampleOptions opt;
  opt.m = 16;
  const auto samples = obsmap::build_samples(cap, opt);

  net::NetConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  net::Model<float> model(cfg.ablation, cfg.widths());
  Rng rng(cfg.seed);
  model.init(rng);

  const std::vector<net::LabeledObject> objects{{"sphere", &samples}};
  std::printf("untrained MAE %.2f deg\n", net::evaluate(model, objects).average_deg);
  net::train(model, samples, cfg, [](const net::EpochLoss& e) {
    std::printf("epoch %d  L_e %.4f  L_n %.4f\n", e.epoch, e.l_e, e.l_n);
  });
  std::printf("trained MAE %.2f deg over %zu pixels\n", net::evaluate(model, objects).average_deg, samples.size());
  return 0;
}
