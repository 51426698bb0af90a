#include "emask/bytes.hpp"
#include "emask/error.hpp"
#include "emask/model.hpp"

namespace emask {

namespace {
constexpr std::string_view kMagic = "EMCK";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  ByteWriter w;
  w.tag(kMagic);
  w.u32(kVersion);
  const ModelConfig& c = model.config();
  for (int v : {c.d_model, c.n_heads, c.n_blocks, c.patch_size, c.image_size, c.max_text_len,
                c.vocab_size, c.mlp_ratio, c.ssf_enabled ? 1 : 0, c.attention_source_layer})
    w.i32(v);
  w.u32(static_cast<std::uint32_t>(model.n_classes()));
  for (const nk::Parameter* p : model.parameters())
    for (double v : p->value.values()) w.f64(v);
  return w.release();
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag(kMagic);
  const std::size_t vat = r.offset();
  if (const auto version = r.u32(); version != kVersion)
    throw ParseError(vat, "unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.d_model = r.i32();
  c.n_heads = r.i32();
  c.n_blocks = r.i32();
  c.patch_size = r.i32();
  c.image_size = r.i32();
  c.max_text_len = r.i32();
  c.vocab_size = r.i32();
  c.mlp_ratio = r.i32();
  c.ssf_enabled = r.i32() != 0;
  c.attention_source_layer = r.i32();
  const std::uint32_t n_classes = r.u32();

  Model model;
  try {
    model = Model(c, 0);
  } catch (const ConfigError& e) {
    throw ParseError(8, std::string("invalid model config: ") + e.what());
  }
  if (n_classes > 0) {
    Rng rng(0);
    model.extend_classifier(static_cast<int>(n_classes), rng);
  }
  for (nk::Parameter* p : model.parameters())
    for (double& v : p->value.values()) v = r.f64();
  if (!r.done()) throw ParseError(r.offset(), "trailing bytes after parameters");
  return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
  write_file_bytes(path, serialize_model(model));
}

Model load_checkpoint(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace emask
