// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

// Library usage without the CLI: build a tiny model and a synthetic preference
// set, train a few steps and compare CHiP against the DPO-only objective.

#include <chip/synthetic.hpp>
#include <chip/trainer.hpp>

#include <cstdio>

int main() {
  chip::ModelConfig mc;
  mc.hidden_dim = 16;
  mc.layer_count = 1;
  mc.image_side = 8;
  mc.seed = 1;

  chip::SyntheticOptions so;
  so.sample_count = 16;
  so.class_count = 4;
  so.image_side = mc.image_side;
  so.patch_side = mc.patch_side;
  so.channels = mc.channels;
  chip::DatasetOptions dopts;
  dopts.image_side = mc.image_side;
  dopts.channels = mc.channels;
  auto samples = chip::synthetic_dataset(so, dopts).samples;

  chip::ChipConfig cfg;
  cfg.lambda_seg = 3.0;
  cfg.train.learning_rate = 1e-3;
  cfg.train.batch_size = 8;
  cfg.train.steps = 30;

  for (chip::Objective o : {chip::Objective::dpo, chip::Objective::chip}) {
    cfg.objective = o;
    chip::TrainResult r = chip::train(cfg, mc, samples);
    chip::EvalReport e = chip::evaluate(r.policy, r.reference, samples, cfg);
    std::printf("%-5s loss %.4f -> %.4f  margin accuracy %.3f\n", chip::objective_name(o), r.metrics.front().objective,
                r.metrics.back().objective, e.margin_accuracy);
  }
}
