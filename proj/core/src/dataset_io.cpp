#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "emask/bytes.hpp"
#include "emask/datagen.hpp"
#include "emask/error.hpp"

namespace emask {

namespace {

constexpr std::string_view kMagic = "EMDS";
constexpr std::uint16_t kVersion = 1;
constexpr int kManifestVersion = 1;

std::vector<std::uint8_t> encode_split(const std::vector<MultimodalSample>& samples, const PatchGeometry& g) {
  ByteWriter w;
  w.tag(kMagic);
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(g.image_size));
  w.u16(static_cast<std::uint16_t>(g.patch_size));
  w.u32(static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    w.u32(s.id);
    w.u32(s.label);
    w.u16(static_cast<std::uint16_t>(s.caption.size()));
    for (auto t : s.caption) w.u16(t);
    w.bytes(s.image);
    w.bytes(s.fg_patch_mask);
  }
  return w.release();
}

std::vector<MultimodalSample> decode_split(std::span<const std::uint8_t> bytes, const PatchGeometry& g,
                                           std::size_t vocab_size) {
  ByteReader r(bytes);
  r.expect_tag(kMagic);
  std::size_t at = r.offset();
  if (auto v = r.u16(); v != kVersion) throw ParseError(at, "unsupported dataset version " + std::to_string(v));
  at = r.offset();
  const int image_size = r.u16();
  const int patch_size = r.u16();
  if (image_size != g.image_size || patch_size != g.patch_size)
    throw ParseError(at, "geometry does not match the manifest");
  const std::uint32_t n = r.u32();
  std::vector<MultimodalSample> out;
  out.reserve(n);
  const std::size_t image_bytes = static_cast<std::size_t>(g.image_size * g.image_size * 3);
  for (std::uint32_t i = 0; i < n; ++i) {
    MultimodalSample s;
    s.id = r.u32();
    s.label = r.u32();
    const std::uint16_t len = r.u16();
    for (std::uint16_t k = 0; k < len; ++k) {
      at = r.offset();
      const std::uint16_t t = r.u16();
      if (t >= vocab_size) throw ParseError(at, "token id " + std::to_string(t) + " outside vocabulary");
      s.caption.push_back(t);
    }
    auto img = r.bytes(image_bytes);
    s.image.assign(img.begin(), img.end());
    auto fg = r.bytes(static_cast<std::size_t>(g.n_patches()));
    s.fg_patch_mask.assign(fg.begin(), fg.end());
    out.push_back(std::move(s));
  }
  if (!r.done()) throw ParseError(r.offset(), "trailing bytes after last record");
  return out;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create dataset directory " + dir + ": " + ec.message());
  const std::filesystem::path root(dir);
  {
    std::ofstream m(root / "manifest.txt");
    if (!m) throw LoadError("cannot write " + (root / "manifest.txt").string());
    const SyntheticSpec& s = ds.spec;
    m << "format = emask-dataset\n"
      << "version = " << kManifestVersion << "\n"
      << "n_classes = " << s.n_classes << "\n"
      << "train_per_class = " << s.train_per_class << "\n"
      << "test_per_class = " << s.test_per_class << "\n"
      << "image_size = " << s.image_size << "\n"
      << "patch_size = " << s.patch_size << "\n"
      << "max_text_len = " << s.max_text_len << "\n"
      << "distractor_probability = " << s.distractor_probability << "\n"
      << "seed = " << s.seed << "\n"
      << "vocab_size = " << ds.vocab.size() << "\n";
    for (std::size_t i = 0; i < ds.vocab.size(); ++i) m << "vocab." << i << " = " << ds.vocab.words()[i] << "\n";
  }
  write_file_bytes((root / "train.bin").string(), encode_split(ds.train, ds.spec.geometry()));
  write_file_bytes((root / "test.bin").string(), encode_split(ds.test, ds.spec.geometry()));
}

Dataset load_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  const auto manifest_path = root / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open " + manifest_path.string());
  std::map<std::string, std::string> kv;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos)
      throw LoadError(manifest_path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw LoadError(manifest_path.string() + ": missing key '" + key + "'");
    return it->second;
  };
  auto get_num = [&](const std::string& key) {
    try {
      return std::stod(get(key));
    } catch (const std::invalid_argument&) {
      throw LoadError(manifest_path.string() + ": key '" + key + "' is not a number");
    }
  };
  if (get("format") != "emask-dataset") throw LoadError(manifest_path.string() + ": not an emask dataset");
  if (static_cast<int>(get_num("version")) != kManifestVersion)
    throw LoadError(manifest_path.string() + ": unsupported manifest version " + get("version"));

  Dataset ds;
  ds.spec.n_classes = static_cast<int>(get_num("n_classes"));
  ds.spec.train_per_class = static_cast<int>(get_num("train_per_class"));
  ds.spec.test_per_class = static_cast<int>(get_num("test_per_class"));
  ds.spec.image_size = static_cast<int>(get_num("image_size"));
  ds.spec.patch_size = static_cast<int>(get_num("patch_size"));
  ds.spec.max_text_len = static_cast<int>(get_num("max_text_len"));
  ds.spec.distractor_probability = get_num("distractor_probability");
  ds.spec.seed = std::stoull(get("seed"));
  try {
    ds.spec.validate();
  } catch (const ConfigError& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  const auto vocab_size = static_cast<std::size_t>(get_num("vocab_size"));
  std::vector<std::string> words;
  for (std::size_t i = 0; i < vocab_size; ++i) words.push_back(get("vocab." + std::to_string(i)));
  ds.vocab = Vocabulary(std::move(words));

  for (const char* split : {"train.bin", "test.bin"}) {
    const auto path = root / split;
    std::vector<std::uint8_t> bytes;
    try {
      bytes = read_file_bytes(path.string());
    } catch (const LoadError&) {
      throw;
    } catch (const std::exception& e) {
      throw LoadError("cannot read " + path.string() + ": " + e.what());
    }
    try {
      auto samples = decode_split(bytes, ds.spec.geometry(), ds.vocab.size());
      (std::string_view(split) == "train.bin" ? ds.train : ds.test) = std::move(samples);
    } catch (const ParseError& e) {
      throw LoadError(path.string() + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace emask
