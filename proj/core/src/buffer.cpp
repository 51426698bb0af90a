#include "emask/buffer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

#include "emask/error.hpp"
#include "emask/log.hpp"

namespace emask {

namespace {
constexpr std::string_view kMagic = "EMBF";
constexpr std::uint16_t kVersion = 1;
constexpr std::uint16_t kDenseFlag = 0x8000;
constexpr std::uint16_t kHalfResFlag = 0x8000;
}  // namespace

std::size_t CostModel::cost(const MaskedExemplar& e) const noexcept {
  std::size_t c = exemplar_header_bytes + e.text.size() * bytes_per_text_token;
  for (const auto& p : e.image) c += p.half_res ? bytes_per_patch / 4 : bytes_per_patch;
  if (!e.dense) c += (e.image.size() + e.text.size()) * bytes_per_position_index;
  return c;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::size_t> select_exemplars(std::span<const Candidate> candidates,
                                          std::span<const double> class_mean, std::size_t budget,
                                          const CostModel& cm) {
  std::vector<double> sim(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    sim[i] = cosine_similarity(candidates[i].feature, class_mean);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });

  std::vector<std::size_t> admitted;
  std::size_t used = 0;
  for (std::size_t i : order) {
    const std::size_t c = cm.cost(candidates[i].exemplar);
    if (used + c > budget) continue;
    used += c;
    admitted.push_back(i);
  }
  if (admitted.empty() && !candidates.empty())
    log_warning("select_exemplars: budget of " + std::to_string(budget) +
                " bytes is smaller than every candidate");
  return admitted;
}

MemoryBuffer::MemoryBuffer(CostModel cm, PatchGeometry geometry, std::size_t budget_bytes, BudgetMode mode)
    : cm_(cm), geometry_(geometry), budget_(budget_bytes), mode_(mode) {}

void MemoryBuffer::register_classes(std::span<const std::uint32_t> labels) {
  for (auto l : labels) store_.try_emplace(l);
  if (mode_ != BudgetMode::GlobalPool) return;
  for (auto& [label, list] : store_) {
    const std::size_t allot = budget_for(label);
    std::size_t used = 0;
    std::size_t keep = 0;
    while (keep < list.size() && used + cm_.cost(list[keep]) <= allot) used += cm_.cost(list[keep++]);
    list.resize(keep);
  }
}

std::size_t MemoryBuffer::budget_for(std::uint32_t label) const {
  if (mode_ == BudgetMode::PerClass) return budget_;
  const std::size_t n = store_.size() + (store_.count(label) ? 0 : 1);
  return budget_ / std::max<std::size_t>(1, n);
}

void MemoryBuffer::insert(MaskedExemplar e) {
  const std::uint32_t label = e.label;
  const std::size_t c = cm_.cost(e);
  const std::size_t allot = budget_for(label);
  const std::size_t used = class_bytes(label);
  if (used + c > allot)
    throw ContractError("buffer: inserting " + std::to_string(c) + " bytes into class " +
                        std::to_string(label) + " (" + std::to_string(used) + " used) exceeds budget " +
                        std::to_string(allot));
  store_[label].push_back(std::move(e));
}

bool MemoryBuffer::empty() const noexcept { return total_exemplars() == 0; }

std::vector<std::uint32_t> MemoryBuffer::classes() const {
  std::vector<std::uint32_t> out;
  for (const auto& [label, list] : store_) out.push_back(label);
  return out;
}

std::vector<std::uint32_t> MemoryBuffer::populated_classes() const {
  std::vector<std::uint32_t> out;
  for (const auto& [label, list] : store_)
    if (!list.empty()) out.push_back(label);
  return out;
}

const std::vector<MaskedExemplar>& MemoryBuffer::exemplars(std::uint32_t label) const {
  static const std::vector<MaskedExemplar> kEmpty;
  auto it = store_.find(label);
  return it == store_.end() ? kEmpty : it->second;
}

std::size_t MemoryBuffer::class_bytes(std::uint32_t label) const {
  std::size_t n = 0;
  for (const auto& e : exemplars(label)) n += cm_.cost(e);
  return n;
}

std::size_t MemoryBuffer::total_bytes() const {
  std::size_t n = 0;
  for (const auto& [label, list] : store_) n += class_bytes(label);
  return n;
}

std::size_t MemoryBuffer::total_exemplars() const {
  std::size_t n = 0;
  for (const auto& [label, list] : store_) n += list.size();
  return n;
}

BufferStats stats(const MemoryBuffer& buffer) {
  BufferStats s;
  double ratio_sum = 0.0;
  std::size_t populated = 0;
  for (std::uint32_t label : buffer.classes()) {
    const auto& list = buffer.exemplars(label);
    ClassStats c;
    c.label = label;
    c.count = list.size();
    c.bytes = buffer.class_bytes(label);
    double r = 0.0;
    for (const auto& e : list) r += e.preserved_ratio();
    ratio_sum += r;
    c.preserved_ratio = list.empty() ? 0.0 : r / static_cast<double>(list.size());
    s.total_exemplars += c.count;
    s.total_bytes += c.bytes;
    if (!list.empty()) ++populated;
    s.per_class.push_back(c);
  }
  if (s.total_exemplars > 0) s.mean_preserved_ratio = ratio_sum / static_cast<double>(s.total_exemplars);
  if (populated > 0) s.mean_exemplars_per_class = static_cast<double>(s.total_exemplars) / static_cast<double>(populated);
  return s;
}

void write_stats_csv(std::ostream& out, const BufferStats& s) {
  out << "class,count,bytes,ratio\n";
  for (const auto& c : s.per_class)
    out << c.label << ',' << c.count << ',' << c.bytes << ',' << std::setprecision(6) << std::fixed
        << c.preserved_ratio << std::defaultfloat << '\n';
}

void write_exemplar(ByteWriter& w, const MaskedExemplar& e, const PatchGeometry& g) {
  const auto full = static_cast<std::size_t>(g.patch_bytes());
  const auto half = static_cast<std::size_t>(g.half_patch_bytes());
  if (e.image.size() >= kDenseFlag || e.text.size() > 0xFFFF)
    throw ContractError("write_exemplar: token count exceeds record limits");
  w.u32(e.label);
  w.u16(static_cast<std::uint16_t>(e.image.size() | (e.dense ? kDenseFlag : 0)));
  w.u16(static_cast<std::uint16_t>(e.text.size()));
  for (const auto& p : e.image) {
    if (p.pixels.size() != (p.half_res ? half : full))
      throw ContractError("write_exemplar: patch at position " + std::to_string(p.position) +
                          " has " + std::to_string(p.pixels.size()) + " bytes");
    if (e.dense && p.half_res) throw ContractError("write_exemplar: dense exemplar with half-res patch");
    if (!e.dense) w.u16(static_cast<std::uint16_t>(p.position | (p.half_res ? kHalfResFlag : 0)));
    w.bytes(p.pixels);
  }
  for (const auto& t : e.text) {
    if (!e.dense) w.u16(t.position);
    w.u16(t.id);
  }
}

MaskedExemplar read_exemplar(ByteReader& r, const PatchGeometry& g) {
  const auto full = static_cast<std::size_t>(g.patch_bytes());
  const auto half = static_cast<std::size_t>(g.half_patch_bytes());
  MaskedExemplar e;
  e.label = r.u32();
  const std::uint16_t n_image_raw = r.u16();
  e.dense = (n_image_raw & kDenseFlag) != 0;
  const std::size_t n_image = n_image_raw & ~kDenseFlag;
  const std::size_t n_text = r.u16();
  if (n_image == 0) throw ParseError(r.offset() - 4, "exemplar without image tokens");
  if (n_image > static_cast<std::size_t>(g.n_patches()))
    throw ParseError(r.offset() - 4, "exemplar has more image tokens than patches");
  int last = -1;
  for (std::size_t k = 0; k < n_image; ++k) {
    StoredPatch p;
    if (e.dense) {
      p.position = static_cast<std::uint16_t>(k);
    } else {
      const std::size_t at = r.offset();
      const std::uint16_t raw = r.u16();
      p.half_res = (raw & kHalfResFlag) != 0;
      p.position = static_cast<std::uint16_t>(raw & ~kHalfResFlag);
      if (p.position >= g.n_patches() || static_cast<int>(p.position) <= last)
        throw ParseError(at, "image position " + std::to_string(p.position) + " out of order or range");
      last = p.position;
    }
    auto px = r.bytes(p.half_res ? half : full);
    p.pixels.assign(px.begin(), px.end());
    e.image.push_back(std::move(p));
  }
  last = -1;
  for (std::size_t i = 0; i < n_text; ++i) {
    StoredToken t;
    if (e.dense) {
      t.position = static_cast<std::uint16_t>(i);
    } else {
      const std::size_t at = r.offset();
      t.position = r.u16();
      if (static_cast<int>(t.position) <= last) throw ParseError(at, "text positions out of order");
      last = t.position;
    }
    t.id = r.u16();
    e.text.push_back(t);
  }
  return e;
}

std::vector<std::uint8_t> serialize(const MemoryBuffer& buffer) {
  ByteWriter w;
  const PatchGeometry& g = buffer.geometry();
  w.tag(kMagic);
  w.u16(kVersion);
  w.u8(static_cast<std::uint8_t>(buffer.mode()));
  w.u8(0);
  w.u16(static_cast<std::uint16_t>(g.image_size));
  w.u16(static_cast<std::uint16_t>(g.patch_size));
  w.u64(buffer.budget_bytes());
  const auto labels = buffer.classes();
  w.u32(static_cast<std::uint32_t>(labels.size()));
  for (std::uint32_t label : labels) {
    const auto& list = buffer.exemplars(label);
    w.u32(label);
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& e : list) {
      w.u16(e.source_image_tokens);
      w.u16(e.source_text_tokens);
      write_exemplar(w, e, g);
    }
  }
  return w.release();
}

MemoryBuffer deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag(kMagic);
  const std::size_t vat = r.offset();
  if (const auto v = r.u16(); v != kVersion)
    throw ParseError(vat, "unsupported buffer version " + std::to_string(v));
  const std::size_t mat = r.offset();
  const std::uint8_t mode = r.u8();
  if (mode > 1) throw ParseError(mat, "unknown budget mode");
  r.u8();
  const std::size_t gat = r.offset();
  PatchGeometry g;
  g.image_size = r.u16();
  g.patch_size = r.u16();
  if (g.patch_size == 0 || g.image_size % g.patch_size != 0 || g.patch_size % 2 != 0)
    throw ParseError(gat, "invalid patch geometry");
  const std::size_t budget = r.u64();
  MemoryBuffer buffer(CostModel::for_geometry(g), g, budget, static_cast<BudgetMode>(mode));
  const std::uint32_t n_classes = r.u32();
  std::vector<std::uint32_t> labels;
  std::vector<std::vector<MaskedExemplar>> lists;
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    const std::size_t lat = r.offset();
    const std::uint32_t label = r.u32();
    if (!labels.empty() && label <= labels.back()) throw ParseError(lat, "class labels out of order");
    const std::uint32_t count = r.u32();
    std::vector<MaskedExemplar> list;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint16_t src_image = r.u16();
      const std::uint16_t src_text = r.u16();
      const std::size_t eat = r.offset();
      MaskedExemplar e = read_exemplar(r, g);
      if (e.label != label) throw ParseError(eat, "exemplar label does not match its class");
      e.source_image_tokens = src_image;
      e.source_text_tokens = src_text;
      list.push_back(std::move(e));
    }
    labels.push_back(label);
    lists.push_back(std::move(list));
  }
  if (!r.done()) throw ParseError(r.offset(), "trailing bytes after buffer");
  buffer.register_classes(labels);
  for (auto& list : lists)
    for (auto& e : list) {
      const std::size_t at = r.offset();
      try {
        buffer.insert(std::move(e));
      } catch (const ContractError& err) {
        throw ParseError(at, err.what());
      }
    }
  return buffer;
}

void save_buffer(const MemoryBuffer& buffer, const std::string& path) {
  write_file_bytes(path, serialize(buffer));
}

MemoryBuffer load_buffer(const std::string& path) { return deserialize(read_file_bytes(path)); }

}  // namespace emask
