#pragma once

#include <vector>

#include "emask/datagen.hpp"
#include "emask/gradcheck.hpp"
#include "emask/model.hpp"
#include "emask/trainer.hpp"

namespace fixture {

inline emask::SyntheticSpec small_spec(int n_classes = 4, int train = 6, int test = 3) {
  emask::SyntheticSpec s;
  s.n_classes = n_classes;
  s.train_per_class = train;
  s.test_per_class = test;
  s.image_size = 32;
  s.patch_size = 8;
  s.max_text_len = 16;
  s.seed = 5;
  return s;
}

inline emask::ModelConfig tiny_model(const emask::SyntheticSpec& s, int d_model = 16, int blocks = 2) {
  emask::ModelConfig m;
  m.d_model = d_model;
  m.n_heads = 2;
  m.n_blocks = blocks;
  m.mlp_ratio = 2;
  m.image_size = s.image_size;
  m.patch_size = s.patch_size;
  m.max_text_len = s.max_text_len;
  return m;
}

inline emask::ExperimentConfig tiny_experiment(const emask::SyntheticSpec& s, int n_phases = 2) {
  emask::ExperimentConfig c;
  c.model = tiny_model(s);
  c.train.epochs_per_phase = 2;
  c.train.batch_size = 4;
  c.n_phases = n_phases;
  c.quota = 2;
  return c;
}

/// Mean masked cross-entropy over a batch, built on one graph per sample.
struct BatchLoss {
  emask::Model* model;
  std::vector<emask::TokenSequence> inputs;
  std::vector<std::size_t> rows;
  std::vector<std::vector<std::uint8_t>> masks;

  double value() const {
    double total = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      emask::nk::Graph g(true);
      const auto nodes = model->build(g, inputs[i]);
      total += g.value(g.masked_cross_entropy(nodes.logits, rows[i], masks[i]))[0];
    }
    return total / static_cast<double>(inputs.size());
  }
  void backward() const {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      emask::nk::Graph g(true);
      const auto nodes = model->build(g, inputs[i]);
      const auto loss = g.masked_cross_entropy(nodes.logits, rows[i], masks[i]);
      g.backward(g.scale(loss, 1.0 / static_cast<double>(inputs.size())));
    }
  }
};

}  // namespace fixture
