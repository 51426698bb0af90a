#include "emask/model.hpp"

#include <algorithm>
#include <cmath>

#include "emask/error.hpp"

namespace emask {

namespace {

constexpr double kInitStd = 0.02;

nk::Tensor normal_tensor(std::vector<std::size_t> shape, Rng& rng, double stddev) {
  nk::Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

std::vector<std::size_t> repeat(std::size_t value, std::size_t n) { return std::vector<std::size_t>(n, value); }

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_blocks <= 0 || patch_size <= 0 || image_size <= 0 ||
      vocab_size <= 0 || mlp_ratio <= 0)
    throw ConfigError("model config: sizes must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("model config: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  if (d_model % n_heads != 0)
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  if (max_text_len < 2) throw ConfigError("model config: max_text_len must be >= 2");
  if (vocab_size > 65536 || n_image_tokens() >= 32768 || max_text_len >= 32768)
    throw ConfigError("model config: token counts exceed 16-bit storage");
  const int layer = source_layer();
  if (layer < 0 || layer >= n_blocks)
    throw ConfigError("model config: attention_source_layer " + std::to_string(attention_source_layer) +
                      " out of range for " + std::to_string(n_blocks) + " blocks");
}

std::vector<double> AttentionBundle::cls_to_text() const {
  std::vector<double> out(n_text);
  for (std::size_t i = 0; i < n_text; ++i) out[i] = matrix(0, text_index(i));
  return out;
}

std::vector<double> AttentionBundle::cls_to_image() const {
  std::vector<double> out(n_image);
  for (std::size_t i = 0; i < n_image; ++i) out[i] = matrix(0, image_index(i));
  return out;
}

nk::Tensor AttentionBundle::image_to_text() const {
  nk::Tensor out = nk::Tensor::matrix(n_image, n_text);
  for (std::size_t j = 0; j < n_image; ++j)
    for (std::size_t i = 0; i < n_text; ++i) out(j, i) = matrix(image_index(j), text_index(i));
  return out;
}

nk::Tensor AttentionBundle::text_to_image() const {
  nk::Tensor out = nk::Tensor::matrix(n_text, n_image);
  for (std::size_t j = 0; j < n_text; ++j)
    for (std::size_t i = 0; i < n_image; ++i) out(j, i) = matrix(text_index(j), image_index(i));
  return out;
}

void extend_classifier(ClassifierHead& head, int n_new, Rng& rng) {
  if (n_new < 1) throw ContractError("extend_classifier: n_new must be >= 1");
  const std::size_t d = head.weight.value.cols();
  const std::size_t old = head.n_classes();
  const std::size_t total = old + static_cast<std::size_t>(n_new);

  nk::Tensor w({total, d});
  std::copy_n(head.weight.value.data(), old * d, w.data());
  std::normal_distribution<double> dist(0.0, kInitStd);
  for (std::size_t i = old * d; i < total * d; ++i) w[i] = dist(rng);

  nk::Tensor b({1, total});
  std::copy_n(head.bias.value.data(), old, b.data());

  head.weight.value = std::move(w);
  head.bias.value = std::move(b);
  head.weight.grad = nk::Tensor();
  head.bias.grad = nk::Tensor();
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = make_rng(seed, {0x6d6f64656cULL});
  const int d = config_.d_model;
  const auto du = static_cast<std::size_t>(d);

  tok_embed_ = add_param("embed.tokens", nk::ParamKind::Backbone,
                         normal_tensor({static_cast<std::size_t>(config_.vocab_size), du}, rng, kInitStd));
  patch_ = add_linear("embed.patch", config_.patch_dim(), d, rng);
  cls_ = add_param("embed.cls", nk::ParamKind::Backbone, normal_tensor({1, du}, rng, kInitStd));
  type_embed_ = add_param("embed.type", nk::ParamKind::Backbone, normal_tensor({3, du}, rng, kInitStd));
  text_pos_ = add_param("embed.text_pos", nk::ParamKind::Backbone,
                        normal_tensor({static_cast<std::size_t>(config_.max_text_len), du}, rng, kInitStd));
  image_pos_ = add_param("embed.image_pos", nk::ParamKind::Backbone,
                         normal_tensor({static_cast<std::size_t>(config_.n_image_tokens()), du}, rng, kInitStd));

  for (int b = 0; b < config_.n_blocks; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    Block blk;
    blk.ln1 = add_norm(pre + "ln1", d);
    blk.qkv = add_linear(pre + "attn.qkv", d, 3 * d, rng);
    blk.proj = add_linear(pre + "attn.proj", d, d, rng);
    blk.ln2 = add_norm(pre + "ln2", d);
    blk.fc1 = add_linear(pre + "mlp.fc1", d, config_.mlp_ratio * d, rng);
    blk.fc2 = add_linear(pre + "mlp.fc2", config_.mlp_ratio * d, d, rng);
    blocks_.push_back(blk);
  }
  final_ln_ = add_norm("final_ln", d);

  head_.weight = {"head.weight", nk::ParamKind::Head, nk::Tensor({0, du}), {}, true};
  head_.bias = {"head.bias", nk::ParamKind::Head, nk::Tensor({1, 0}), {}, true};
}

std::size_t Model::add_param(std::string name, nk::ParamKind kind, nk::Tensor value) {
  params_.push_back({std::move(name), kind, std::move(value), {}, true});
  return params_.size() - 1;
}

void Model::add_ssf(Affine& a, const std::string& name, int dim) {
  if (!config_.ssf_enabled) return;
  const auto n = static_cast<std::size_t>(dim);
  a.ssf_scale = add_param(name + ".ssf_scale", nk::ParamKind::Ssf, nk::Tensor({1, n}, 1.0));
  a.ssf_shift = add_param(name + ".ssf_shift", nk::ParamKind::Ssf, nk::Tensor({1, n}, 0.0));
}

Model::Affine Model::add_linear(const std::string& name, int in, int out, Rng& rng) {
  Affine a;
  a.a = add_param(name + ".weight", nk::ParamKind::Backbone,
                  normal_tensor({static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, rng, kInitStd));
  a.b = add_param(name + ".bias", nk::ParamKind::Backbone, nk::Tensor({1, static_cast<std::size_t>(out)}));
  add_ssf(a, name, out);
  return a;
}

Model::Affine Model::add_norm(const std::string& name, int dim) {
  Affine a;
  const auto n = static_cast<std::size_t>(dim);
  a.a = add_param(name + ".gamma", nk::ParamKind::Backbone, nk::Tensor({1, n}, 1.0));
  a.b = add_param(name + ".beta", nk::ParamKind::Backbone, nk::Tensor({1, n}, 0.0));
  add_ssf(a, name, dim);
  return a;
}

nk::Var Model::ssf(nk::Graph& g, nk::Var y, const Affine& a) {
  if (a.ssf_scale == kNone) return y;
  return g.add_row(g.mul_row(y, p(g, a.ssf_scale)), p(g, a.ssf_shift));
}

nk::Var Model::linear(nk::Graph& g, nk::Var x, const Affine& a) {
  return ssf(g, g.add_row(g.matmul(x, p(g, a.a)), p(g, a.b)), a);
}

nk::Var Model::norm(nk::Graph& g, nk::Var x, const Affine& a) {
  return ssf(g, g.layernorm(x, p(g, a.a), p(g, a.b), 1e-5), a);
}

TokenSequence Model::embed(const MultimodalSample& s) const {
  const PatchGeometry geo = config_.geometry();
  const auto n_image = static_cast<std::size_t>(geo.n_patches());
  if (s.image.size() != static_cast<std::size_t>(geo.image_size * geo.image_size * 3))
    throw InputError("embed: image has " + std::to_string(s.image.size()) + " bytes, expected " +
                     std::to_string(geo.image_size * geo.image_size * 3));
  if (s.caption.size() > static_cast<std::size_t>(config_.max_text_len))
    throw InputError("embed: caption of " + std::to_string(s.caption.size()) +
                     " tokens exceeds max_text_len " + std::to_string(config_.max_text_len));

  TokenSequence seq;
  for (std::size_t i = 0; i < s.caption.size(); ++i) {
    if (s.caption[i] >= config_.vocab_size) throw InputError("embed: token id out of vocabulary");
    seq.text_ids.push_back(s.caption[i]);
    seq.text_positions.push_back(static_cast<std::uint16_t>(i));
  }
  const auto pd = static_cast<std::size_t>(geo.patch_bytes());
  seq.patches = nk::Tensor({n_image, pd});
  for (std::size_t k = 0; k < n_image; ++k) {
    seq.image_positions.push_back(static_cast<std::uint16_t>(k));
    const auto patch = extract_patch(s.image, geo, static_cast<int>(k));
    for (std::size_t j = 0; j < pd; ++j) seq.patches(k, j) = patch[j] / 255.0 - 0.5;
  }
  return seq;
}

TokenSequence Model::embed(const MaskedExemplar& e) const {
  const PatchGeometry geo = config_.geometry();
  const auto pd = static_cast<std::size_t>(geo.patch_bytes());
  if (e.image.empty()) throw InputError("embed: exemplar has no image tokens");
  TokenSequence seq;
  for (const auto& t : e.text) {
    if (t.position >= config_.max_text_len) throw InputError("embed: text position out of range");
    if (t.id >= config_.vocab_size) throw InputError("embed: token id out of vocabulary");
    seq.text_ids.push_back(t.id);
    seq.text_positions.push_back(t.position);
  }
  seq.patches = nk::Tensor({e.image.size(), pd});
  for (std::size_t k = 0; k < e.image.size(); ++k) {
    const auto& sp = e.image[k];
    if (sp.position >= geo.n_patches()) throw InputError("embed: image position out of range");
    seq.image_positions.push_back(sp.position);
    const std::vector<std::uint8_t> full =
        sp.half_res ? upsample_patch(sp.pixels, geo.patch_size) : sp.pixels;
    if (full.size() != pd) throw InputError("embed: patch has wrong byte count");
    for (std::size_t j = 0; j < pd; ++j) seq.patches(k, j) = full[j] / 255.0 - 0.5;
  }
  return seq;
}

ForwardNodes Model::build(nk::Graph& g, const TokenSequence& seq) {
  if (head_.n_classes() == 0) throw ContractError("forward: classifier head is empty");
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto n_heads = static_cast<std::size_t>(config_.n_heads);
  const std::size_t dh = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nt = seq.n_text();
  const std::size_t ni = seq.n_image();
  if (ni == 0) throw InputError("forward: sequence has no image tokens");
  if (seq.patches.rows() != ni) throw DimensionError("forward: patch matrix does not match image positions");

  nk::Var types = p(g, type_embed_);
  std::vector<nk::Var> parts;
  parts.push_back(g.add(p(g, cls_), g.gather_rows(types, {0})));
  if (nt > 0) {
    std::vector<std::size_t> ids(seq.text_ids.begin(), seq.text_ids.end());
    std::vector<std::size_t> pos(seq.text_positions.begin(), seq.text_positions.end());
    nk::Var x = g.gather_rows(p(g, tok_embed_), std::move(ids));
    x = g.add(x, g.gather_rows(p(g, text_pos_), std::move(pos)));
    parts.push_back(g.add(x, g.gather_rows(types, repeat(1, nt))));
  }
  {
    std::vector<std::size_t> pos(seq.image_positions.begin(), seq.image_positions.end());
    nk::Var x = linear(g, g.constant(seq.patches), patch_);
    x = g.add(x, g.gather_rows(p(g, image_pos_), std::move(pos)));
    parts.push_back(g.add(x, g.gather_rows(types, repeat(2, ni))));
  }
  nk::Var x = g.concat_rows(parts);

  ForwardNodes out;
  const int source = config_.source_layer();
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    if (b + 1 == blocks_.size()) out.last_block_input = x;

    nk::Var h = norm(g, x, blk.ln1);
    nk::Var qkv = linear(g, h, blk.qkv);
    std::vector<nk::Var> heads;
    for (std::size_t k = 0; k < n_heads; ++k) {
      nk::Var q = g.slice_cols(qkv, k * dh, dh);
      nk::Var key = g.slice_cols(qkv, d + k * dh, dh);
      nk::Var v = g.slice_cols(qkv, 2 * d + k * dh, dh);
      nk::Var att = g.softmax_rows(g.scale(g.matmul_nt(q, key), att_scale));
      if (static_cast<int>(b) == source) out.source_attention.push_back(att);
      heads.push_back(g.matmul(att, v));
    }
    x = g.add(x, linear(g, g.concat_cols(heads), blk.proj));

    nk::Var h2 = norm(g, x, blk.ln2);
    nk::Var f = g.gelu(linear(g, h2, blk.fc1));
    x = g.add(x, linear(g, f, blk.fc2));
  }

  out.final_tokens = norm(g, x, final_ln_);
  out.cls_feature = g.slice_rows(out.final_tokens, 0, 1);
  out.logits = g.add_row(g.matmul_nt(out.cls_feature, g.param(head_.weight)), g.param(head_.bias));
  return out;
}

ForwardOutput Model::forward(const TokenSequence& seq, Mode) {
  nk::Graph g;
  ForwardNodes nodes = build(g, seq);
  ForwardOutput out;
  out.logits = g.value(nodes.logits);
  out.cls_feature = g.value(nodes.cls_feature);
  out.attention.n_text = seq.n_text();
  out.attention.n_image = seq.n_image();
  out.attention.layer = config_.source_layer();
  const std::size_t len = seq.length();
  out.attention.matrix = nk::Tensor::matrix(len, len);
  const double inv = 1.0 / static_cast<double>(nodes.source_attention.size());
  for (nk::Var h : nodes.source_attention) {
    const nk::Tensor& a = g.value(h);
    for (std::size_t i = 0; i < a.size(); ++i) out.attention.matrix[i] += a[i];
  }
  for (double& v : out.attention.matrix.values()) v *= inv;
  return out;
}

std::vector<nk::Parameter*> Model::parameters() {
  std::vector<nk::Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

std::vector<const nk::Parameter*> Model::parameters() const {
  std::vector<const nk::Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

std::vector<nk::Parameter*> Model::trainable_params(Regime regime) {
  if (regime == Regime::SSF && !config_.ssf_enabled)
    throw ConfigError("SSF regime requires a model built with ssf_enabled");
  std::vector<nk::Parameter*> selected;
  for (nk::Parameter* p : parameters()) {
    p->trainable = regime == Regime::FT || p->kind != nk::ParamKind::Backbone;
    if (p->trainable) selected.push_back(p);
  }
  return selected;
}

void Model::zero_grad() {
  for (nk::Parameter* p : parameters()) p->zero_grad();
}

}  // namespace emask
