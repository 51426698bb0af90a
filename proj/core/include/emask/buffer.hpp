#pragma once

// Byte-budgeted replay memory.
//
// Exemplar record layout (little-endian), whose length is exactly cost():
//   u32 label | u16 n_image (bit 15: dense) | u16 n_text
//   dense : n_image x patch bytes, then n_text x u16 token id
//   sparse: n_image x (u16 position (bit 15: half resolution) + patch bytes),
//           then n_text x (u16 position + u16 token id)

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <vector>

#include "emask/bytes.hpp"
#include "emask/sample.hpp"

namespace emask {

struct CostModel {
  std::size_t bytes_per_patch = 16 * 16 * 3;
  std::size_t bytes_per_text_token = 2;
  std::size_t bytes_per_position_index = 2;
  std::size_t exemplar_header_bytes = 8;

  static CostModel for_geometry(const PatchGeometry& g) {
    CostModel cm;
    cm.bytes_per_patch = static_cast<std::size_t>(g.patch_bytes());
    return cm;
  }

  std::size_t raw_cost(std::size_t n_image, std::size_t n_text) const noexcept {
    return exemplar_header_bytes + n_image * bytes_per_patch + n_text * bytes_per_text_token;
  }
  std::size_t cost(const MultimodalSample& s, const PatchGeometry& g) const noexcept {
    return raw_cost(static_cast<std::size_t>(g.n_patches()), s.caption.size());
  }
  std::size_t cost(const MaskedExemplar& e) const noexcept;

  friend bool operator==(const CostModel&, const CostModel&) = default;
};

/// Cosine similarity; 0 when either vector has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct Candidate {
  MaskedExemplar exemplar;
  std::vector<double> feature;
};

/// Ranks candidates by descending cosine similarity to `class_mean` (ties by
/// ascending index) and admits them in rank order, skipping any that would
/// overflow `budget`. Returns admitted candidate indices in rank order.
std::vector<std::size_t> select_exemplars(std::span<const Candidate> candidates,
                                          std::span<const double> class_mean, std::size_t budget,
                                          const CostModel& cm);

enum class BudgetMode : std::uint8_t { PerClass = 0, GlobalPool = 1 };

class MemoryBuffer {
 public:
  MemoryBuffer() = default;
  /// PerClass: every class may hold `budget_bytes`. GlobalPool: all classes
  /// share `budget_bytes`, split evenly over the registered classes.
  MemoryBuffer(CostModel cm, PatchGeometry geometry, std::size_t budget_bytes,
               BudgetMode mode = BudgetMode::PerClass);

  const CostModel& cost_model() const noexcept { return cm_; }
  const PatchGeometry& geometry() const noexcept { return geometry_; }
  BudgetMode mode() const noexcept { return mode_; }
  std::size_t budget_bytes() const noexcept { return budget_; }

  /// Registers classes about to be filled. In GlobalPool mode this shrinks
  /// every existing class's allotment and drops its lowest-ranked exemplars
  /// until it fits.
  void register_classes(std::span<const std::uint32_t> labels);
  std::size_t budget_for(std::uint32_t label) const;

  /// Appends an exemplar; throws ContractError if the class budget would be exceeded.
  void insert(MaskedExemplar e);

  bool empty() const noexcept;
  std::vector<std::uint32_t> classes() const;
  /// Classes holding at least one exemplar.
  std::vector<std::uint32_t> populated_classes() const;
  const std::vector<MaskedExemplar>& exemplars(std::uint32_t label) const;
  std::size_t class_bytes(std::uint32_t label) const;
  std::size_t total_bytes() const;
  std::size_t total_exemplars() const;

  friend bool operator==(const MemoryBuffer&, const MemoryBuffer&) = default;

 private:
  CostModel cm_;
  PatchGeometry geometry_;
  std::size_t budget_ = 0;
  BudgetMode mode_ = BudgetMode::PerClass;
  std::map<std::uint32_t, std::vector<MaskedExemplar>> store_;
};

struct ClassStats {
  std::uint32_t label = 0;
  std::size_t count = 0;
  std::size_t bytes = 0;
  double preserved_ratio = 0.0;
};

struct BufferStats {
  double mean_preserved_ratio = 0.0;
  double mean_exemplars_per_class = 0.0;
  std::size_t total_bytes = 0;
  std::size_t total_exemplars = 0;
  std::vector<ClassStats> per_class;
};

BufferStats stats(const MemoryBuffer& buffer);
void write_stats_csv(std::ostream& out, const BufferStats& s);

void write_exemplar(ByteWriter& w, const MaskedExemplar& e, const PatchGeometry& g);
MaskedExemplar read_exemplar(ByteReader& r, const PatchGeometry& g);

std::vector<std::uint8_t> serialize(const MemoryBuffer& buffer);
MemoryBuffer deserialize(std::span<const std::uint8_t> bytes);
void save_buffer(const MemoryBuffer& buffer, const std::string& path);
MemoryBuffer load_buffer(const std::string& path);

}  // namespace emask
