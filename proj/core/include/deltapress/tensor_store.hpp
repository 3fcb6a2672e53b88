#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltapress/numeric.hpp"
#include "json.hpp"

namespace deltapress {

enum class DType { kF32, kF16, kBF16, kU8Packed };

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);
// Bytes per element; 1 for u8-packed blobs.
std::size_t dtype_size(DType dtype);

struct TensorEntry {
  DType dtype = DType::kF32;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::int64_t element_count() const;
  bool is_matrix() const { return shape.size() == 2; }

  // Upcasts f16/bf16 to f32. Throws DataError for u8-packed entries.
  std::vector<float> to_floats() const;
  // 2-D tensors map to (rows, cols); anything else is flattened to 1 x N.
  Matrix to_matrix() const;

  static TensorEntry from_floats(std::span<const float> values,
                                 std::vector<std::int64_t> shape, DType dtype);
  static TensorEntry from_matrix(const Matrix& m, DType dtype);
  static TensorEntry packed(std::vector<std::uint8_t> blob);

  bool operator==(const TensorEntry&) const = default;
};

// In-memory form of the on-disk container:
//   u64 little-endian header length | JSON header | payload
// The header maps tensor name -> {dtype, shape, data_offsets}; the reserved
// "__metadata__" key carries an arbitrary JSON object (the artifact manifest).
struct TensorContainer {
  std::map<std::string, TensorEntry> tensors;
  nlohmann::json metadata;  // null when absent

  bool contains(const std::string& name) const {
    return tensors.count(name) != 0;
  }
  const TensorEntry& at(const std::string& name) const;
  bool operator==(const TensorContainer&) const = default;
};

inline constexpr std::string_view kMetadataKey = "__metadata__";

TensorContainer parse_container(std::span<const std::uint8_t> bytes);
// Deterministic: names and JSON keys sorted, no whitespace, payload in name order.
std::vector<std::uint8_t> serialize_container(const TensorContainer& container);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

TensorContainer read_container(const std::filesystem::path& path);
void write_container(const std::filesystem::path& path,
                     const TensorContainer& container);

// ---------------------------------------------------------------------------
// Deltas

struct DeltaTensor {
  std::string name;
  DType source_dtype = DType::kF32;
  std::vector<std::int64_t> shape;  // original shape
  Matrix data;                      // W_ft - W_base

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index cols() const { return data.cols(); }
};

// Selects which 2-D tensors are delta-compressed. Default: every 2-D tensor.
struct DeltaFilter {
  std::optional<std::regex> include;

  bool accepts(const std::string& name, const TensorEntry& entry) const;
};

struct DeltaSet {
  std::vector<DeltaTensor> compressible;  // filtered 2-D tensors
  std::vector<DeltaTensor> passthrough;   // stored uncompressed
};

DeltaSet compute_delta(const TensorContainer& base,
                       const TensorContainer& finetuned,
                       const DeltaFilter& filter = {});

// Splits a container that already holds deltas (as written by `delta`).
DeltaSet split_delta_container(const TensorContainer& deltas,
                               const DeltaFilter& filter = {});

TensorContainer delta_container(const DeltaSet& deltas);

// ---------------------------------------------------------------------------
// Compression-ratio accounting. Counts are in 16-bit-entry equivalents.

double compression_ratio(double original_param_count,
                         double stored_equiv_16bit_count);

// Expected stored entries for factorized storage: every kept column charges
// (m + n) * keep_k entries plus one 16-bit singular value.
double factorized_storage_count(std::int64_t rows, std::int64_t cols,
                                std::span<const double> keep_fractions);

// As above with per-column code widths charged at bits/16 of an entry.
double quantized_storage_count(std::int64_t rows, std::int64_t cols,
                               std::span<const double> keep_fractions,
                               std::span<const int> bits);

}  // namespace deltapress
