#pragma once

// Single-stream multimodal transformer: [CLS] ++ text tokens ++ image patches
// share one encoder. Optional SSF scale/shift after every linear projection
// and layernorm output.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "emask/graph.hpp"
#include "emask/rng.hpp"
#include "emask/sample.hpp"

namespace emask {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 4;
  int patch_size = 16;
  int image_size = 64;
  int max_text_len = 32;
  int vocab_size = 256;
  int mlp_ratio = 4;
  bool ssf_enabled = true;
  /// Block whose attention is exported; negative counts from the end (-1 = last).
  int attention_source_layer = -1;

  void validate() const;
  PatchGeometry geometry() const noexcept { return {image_size, patch_size}; }
  int n_image_tokens() const noexcept { return geometry().n_patches(); }
  int patch_dim() const noexcept { return geometry().patch_bytes(); }
  int source_layer() const noexcept {
    return attention_source_layer < 0 ? n_blocks + attention_source_layer : attention_source_layer;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Modality : std::uint8_t { Cls = 0, Text = 1, Image = 2 };

/// Embedding-ready token layout. Positions are the tokens' original indices,
/// so masked inputs keep their position embeddings.
struct TokenSequence {
  std::vector<std::uint16_t> text_ids;
  std::vector<std::uint16_t> text_positions;
  std::vector<std::uint16_t> image_positions;
  nk::Tensor patches;  // n_image x patch_dim, pixels scaled to [-0.5, 0.5]

  std::size_t n_text() const noexcept { return text_ids.size(); }
  std::size_t n_image() const noexcept { return image_positions.size(); }
  std::size_t length() const noexcept { return 1 + n_text() + n_image(); }
  Modality modality(std::size_t index) const noexcept {
    if (index == 0) return Modality::Cls;
    return index <= n_text() ? Modality::Text : Modality::Image;
  }
};

/// Head-averaged attention of one block. Rows are queries, columns keys, in
/// the layout [CLS, text 0..n_text-1, image 0..n_image-1].
struct AttentionBundle {
  std::size_t n_text = 0;
  std::size_t n_image = 0;
  int layer = 0;
  nk::Tensor matrix;

  std::size_t length() const noexcept { return 1 + n_text + n_image; }
  std::size_t text_index(std::size_t i) const noexcept { return 1 + i; }
  std::size_t image_index(std::size_t i) const noexcept { return 1 + n_text + i; }

  double cls_self() const { return matrix(0, 0); }
  std::vector<double> cls_to_text() const;
  std::vector<double> cls_to_image() const;
  /// n_image x n_text: attention from image queries onto text keys.
  nk::Tensor image_to_text() const;
  /// n_text x n_image: attention from text queries onto image keys.
  nk::Tensor text_to_image() const;
};

struct ClassifierHead {
  nk::Parameter weight;  // n_classes x d_model
  nk::Parameter bias;    // 1 x n_classes

  std::size_t n_classes() const noexcept { return weight.value.rows(); }
};

/// Appends `n_new` rows drawn from N(0, 0.02); existing rows are untouched.
void extend_classifier(ClassifierHead& head, int n_new, Rng& rng);

enum class Regime : std::uint8_t { FT, SSF };

enum class Mode : std::uint8_t { Train, Eval };

struct ForwardOutput {
  nk::Tensor logits;       // 1 x n_classes
  nk::Tensor cls_feature;  // 1 x d_model
  AttentionBundle attention;
};

/// Graph handles of the interesting intermediate values of one forward pass.
struct ForwardNodes {
  nk::Var logits;
  nk::Var cls_feature;
  nk::Var final_tokens;       // L x d, after the final layernorm
  nk::Var last_block_input;   // L x d, residual stream entering the last block
  std::vector<nk::Var> source_attention;  // per head, L x L
};

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  TokenSequence embed(const MultimodalSample& sample) const;
  TokenSequence embed(const MaskedExemplar& exemplar) const;

  ForwardNodes build(nk::Graph& graph, const TokenSequence& seq);
  ForwardOutput forward(const TokenSequence& seq, Mode mode = Mode::Eval);

  ClassifierHead& head() noexcept { return head_; }
  const ClassifierHead& head() const noexcept { return head_; }
  std::size_t n_classes() const noexcept { return head_.n_classes(); }
  void extend_classifier(int n_new, Rng& rng) { emask::extend_classifier(head_, n_new, rng); }

  /// Every parameter in declaration order (backbone, SSF, then head).
  std::vector<nk::Parameter*> parameters();
  std::vector<const nk::Parameter*> parameters() const;
  std::size_t parameter_count() const;

  /// Marks the regime's parameters trainable, freezes the rest, and returns
  /// the trainable selection.
  std::vector<nk::Parameter*> trainable_params(Regime regime);
  void zero_grad();

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  struct Affine {
    std::size_t a = kNone;  // weight or gamma
    std::size_t b = kNone;  // bias or beta
    std::size_t ssf_scale = kNone;
    std::size_t ssf_shift = kNone;
  };
  struct Block {
    Affine ln1, qkv, proj, ln2, fc1, fc2;
  };

  std::size_t add_param(std::string name, nk::ParamKind kind, nk::Tensor value);
  Affine add_linear(const std::string& name, int in, int out, Rng& rng);
  Affine add_norm(const std::string& name, int dim);
  void add_ssf(Affine& a, const std::string& name, int dim);

  nk::Var linear(nk::Graph& g, nk::Var x, const Affine& a);
  nk::Var norm(nk::Graph& g, nk::Var x, const Affine& a);
  nk::Var ssf(nk::Graph& g, nk::Var y, const Affine& a);
  nk::Var p(nk::Graph& g, std::size_t index) { return g.param(params_[index]); }

  ModelConfig config_;
  std::vector<nk::Parameter> params_;
  std::size_t tok_embed_ = kNone, cls_ = kNone, type_embed_ = kNone;
  std::size_t text_pos_ = kNone, image_pos_ = kNone;
  Affine patch_;
  std::vector<Block> blocks_;
  Affine final_ln_;
  ClassifierHead head_;
};

/// Versioned binary checkpoint: magic, version, ModelConfig, head size, then
/// every parameter in declaration order as little-endian f64.
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace emask
