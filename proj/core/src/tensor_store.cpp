#include "deltapress/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "deltapress/error.hpp"

namespace deltapress {
namespace {

using json = nlohmann::json;

std::uint64_t load_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void store_u64_le(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint32_t load_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t load_u16_le(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::string at_byte(std::uint64_t pos) {
  return " at byte " + std::to_string(pos);
}

struct Span {
  std::string name;
  std::uint64_t begin;
  std::uint64_t end;
};

TensorEntry parse_entry(const std::string& name, const json& desc,
                        std::span<const std::uint8_t> payload,
                        std::uint64_t payload_pos, std::uint64_t& begin,
                        std::uint64_t& end) {
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("tensor '" + name + "': " + why);
  };
  if (!desc.is_object()) throw fail("descriptor is not an object" + at_byte(8));
  TensorEntry entry;
  try {
    entry.dtype = parse_dtype(desc.at("dtype").get<std::string>());
    for (const auto& d : desc.at("shape")) {
      const auto dim = d.get<std::int64_t>();
      if (dim < 0) throw fail("negative dimension");
      entry.shape.push_back(dim);
    }
    const auto& offsets = desc.at("data_offsets");
    if (!offsets.is_array() || offsets.size() != 2) {
      throw fail("data_offsets must be [begin, end]");
    }
    begin = offsets[0].get<std::uint64_t>();
    end = offsets[1].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw fail(std::string("bad descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  if (end < begin) {
    throw fail("data_offsets end precedes begin" + at_byte(payload_pos + begin));
  }
  const auto expected = static_cast<std::uint64_t>(entry.element_count()) *
                        dtype_size(entry.dtype);
  if (end - begin != expected) {
    throw fail("byte length " + std::to_string(end - begin) +
               " does not match shape (expected " + std::to_string(expected) +
               ")" + at_byte(payload_pos + begin));
  }
  if (end > payload.size()) {
    throw fail("truncated payload: needs bytes up to " +
               std::to_string(payload_pos + end) + " but file ends" +
               at_byte(payload_pos + payload.size()));
  }
  entry.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(begin),
                     payload.begin() + static_cast<std::ptrdiff_t>(end));
  return entry;
}

}  // namespace

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32:
      return "f32";
    case DType::kF16:
      return "f16";
    case DType::kBF16:
      return "bf16";
    case DType::kU8Packed:
      return "u8-packed";
  }
  return "?";
}

DType parse_dtype(std::string_view name) {
  if (name == "f32") return DType::kF32;
  if (name == "f16") return DType::kF16;
  if (name == "bf16") return DType::kBF16;
  if (name == "u8-packed") return DType::kU8Packed;
  throw ConfigError("unsupported dtype '" + std::string(name) + "'");
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32:
      return 4;
    case DType::kF16:
    case DType::kBF16:
      return 2;
    case DType::kU8Packed:
      return 1;
  }
  return 0;
}

std::int64_t TensorEntry::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

std::vector<float> TensorEntry::to_floats() const {
  const auto n = static_cast<std::size_t>(element_count());
  std::vector<float> out(n);
  const std::uint8_t* p = bytes.data();
  switch (dtype) {
    case DType::kF32:
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::bit_cast<float>(load_u32_le(p + 4 * i));
      }
      break;
    case DType::kF16:
      for (std::size_t i = 0; i < n; ++i) out[i] = f16_value(load_u16_le(p + 2 * i));
      break;
    case DType::kBF16:
      for (std::size_t i = 0; i < n; ++i) out[i] = bf16_value(load_u16_le(p + 2 * i));
      break;
    case DType::kU8Packed:
      throw DataError("u8-packed tensor has no float view");
  }
  return out;
}

Matrix TensorEntry::to_matrix() const {
  const auto values = to_floats();
  Eigen::Index rows = 1;
  Eigen::Index cols = static_cast<Eigen::Index>(values.size());
  if (shape.size() == 2) {
    rows = shape[0];
    cols = shape[1];
  }
  Matrix m(rows, cols);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

TensorEntry TensorEntry::from_floats(std::span<const float> values,
                                     std::vector<std::int64_t> shape,
                                     DType dtype) {
  TensorEntry e;
  e.dtype = dtype;
  e.shape = std::move(shape);
  if (static_cast<std::size_t>(e.element_count()) != values.size()) {
    throw ConfigError("value count does not match shape");
  }
  e.bytes.resize(values.size() * dtype_size(dtype));
  std::uint8_t* p = e.bytes.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    switch (dtype) {
      case DType::kF32: {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) p[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
        break;
      }
      case DType::kF16:
      case DType::kBF16: {
        const auto bits = dtype == DType::kF16 ? f16_bits(values[i]) : bf16_bits(values[i]);
        p[2 * i] = static_cast<std::uint8_t>(bits);
        p[2 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
        break;
      }
      case DType::kU8Packed:
        throw ConfigError("cannot encode floats as u8-packed");
    }
  }
  return e;
}

TensorEntry TensorEntry::from_matrix(const Matrix& m, DType dtype) {
  return from_floats(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())),
                     {m.rows(), m.cols()}, dtype);
}

TensorEntry TensorEntry::packed(std::vector<std::uint8_t> blob) {
  TensorEntry e;
  e.dtype = DType::kU8Packed;
  e.shape = {static_cast<std::int64_t>(blob.size())};
  e.bytes = std::move(blob);
  return e;
}

const TensorEntry& TensorContainer::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("missing tensor '" + name + "'");
  return it->second;
}

TensorContainer parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) {
    throw DataError("truncated container: " + std::to_string(bytes.size()) +
                    " bytes, need an 8-byte header length" + at_byte(0));
  }
  const std::uint64_t header_len = load_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) {
    throw DataError("header length " + std::to_string(header_len) +
                    " exceeds file size " + std::to_string(bytes.size()) + at_byte(0));
  }
  const auto header_bytes = bytes.subspan(8, header_len);
  const auto payload = bytes.subspan(8 + header_len);
  const std::uint64_t payload_pos = 8 + header_len;

  json header;
  try {
    header = json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const json::parse_error& e) {
    throw DataError("malformed JSON header: " + std::string(e.what()) +
                    at_byte(8 + e.byte));
  }
  if (!header.is_object()) throw DataError("header is not a JSON object" + at_byte(8));

  TensorContainer out;
  std::vector<Span> spans;
  for (const auto& [name, desc] : header.items()) {
    if (name == kMetadataKey) {
      if (!desc.is_object()) throw DataError("__metadata__ must be an object" + at_byte(8));
      out.metadata = desc;
      continue;
    }
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    out.tensors.emplace(name, parse_entry(name, desc, payload, payload_pos, begin, end));
    spans.push_back({name, begin, end});
  }

  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  std::uint64_t cursor = 0;
  const Span* prev = nullptr;
  for (const auto& s : spans) {
    if (s.begin < cursor) {
      throw DataError("tensor '" + s.name + "': overlapping offsets with '" +
                      prev->name + "'" + at_byte(payload_pos + s.begin));
    }
    if (s.begin > cursor) {
      throw DataError("tensor '" + s.name + "': gap in payload before it" +
                      at_byte(payload_pos + cursor));
    }
    cursor = s.end;
    prev = &s;
  }
  if (cursor != payload.size()) {
    throw DataError("payload has " + std::to_string(payload.size() - cursor) +
                    " trailing bytes not owned by any tensor" +
                    at_byte(payload_pos + cursor));
  }
  return out;
}

std::vector<std::uint8_t> serialize_container(const TensorContainer& container) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, entry] : container.tensors) {
    if (name == kMetadataKey) throw ConfigError("tensor name __metadata__ is reserved");
    const auto expected = static_cast<std::uint64_t>(entry.element_count()) *
                          dtype_size(entry.dtype);
    if (expected != entry.bytes.size()) {
      throw ConfigError("tensor '" + name + "': byte length does not match shape");
    }
    header[name] = {{"dtype", std::string(dtype_name(entry.dtype))},
                    {"shape", entry.shape},
                    {"data_offsets", {offset, offset + entry.bytes.size()}}};
    offset += entry.bytes.size();
  }
  if (!container.metadata.is_null()) header[std::string(kMetadataKey)] = container.metadata;

  std::string text;
  try {
    text = header.dump();
  } catch (const json::exception& e) {
    throw DataError(std::string("cannot encode header: ") + e.what());
  }
  std::vector<std::uint8_t> out(8 + text.size() + offset);
  store_u64_le(out.data(), text.size());
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* p = out.data() + 8 + text.size();
  for (const auto& [name, entry] : container.tensors) {
    if (!entry.bytes.empty()) std::memcpy(p, entry.bytes.data(), entry.bytes.size());
    p += entry.bytes.size();
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size != 0 && !in.read(reinterpret_cast<char*>(bytes.data()),
                            static_cast<std::streamsize>(size))) {
    throw DataError("read failed for '" + path.string() + "'");
  }
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

TensorContainer read_container(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_container(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_container(const std::filesystem::path& path,
                     const TensorContainer& container) {
  write_file_bytes(path, serialize_container(container));
}

// ---------------------------------------------------------------------------

bool DeltaFilter::accepts(const std::string& name, const TensorEntry& entry) const {
  if (!entry.is_matrix()) return false;
  return !include || std::regex_search(name, *include);
}

namespace {

void check_finite(const Matrix& m, const std::string& name) {
  if (!m.allFinite()) throw DataError("tensor '" + name + "': non-finite delta entry");
}

}  // namespace

DeltaSet compute_delta(const TensorContainer& base,
                       const TensorContainer& finetuned,
                       const DeltaFilter& filter) {
  for (const auto& [name, entry] : base.tensors) {
    if (!finetuned.contains(name)) {
      throw DataError("missing tensor '" + name + "' in fine-tuned checkpoint");
    }
  }
  DeltaSet out;
  for (const auto& [name, ft] : finetuned.tensors) {
    if (!base.contains(name)) {
      throw DataError("missing tensor '" + name + "' in base checkpoint");
    }
    const auto& b = base.at(name);
    if (b.shape != ft.shape) throw DataError("tensor '" + name + "': shape mismatch");
    if (ft.dtype == DType::kU8Packed || b.dtype == DType::kU8Packed) {
      throw DataError("tensor '" + name + "': u8-packed tensors have no delta");
    }
    DeltaTensor d;
    d.name = name;
    d.source_dtype = ft.dtype;
    d.shape = ft.shape;
    d.data = ft.to_matrix() - b.to_matrix();
    check_finite(d.data, name);
    (filter.accepts(name, ft) ? out.compressible : out.passthrough).push_back(std::move(d));
  }
  return out;
}

DeltaSet split_delta_container(const TensorContainer& deltas,
                               const DeltaFilter& filter) {
  const json* dtypes = nullptr;
  if (deltas.metadata.is_object() && deltas.metadata.contains("source_dtypes")) {
    dtypes = &deltas.metadata["source_dtypes"];
  }
  DeltaSet out;
  for (const auto& [name, entry] : deltas.tensors) {
    if (entry.dtype == DType::kU8Packed) {
      throw DataError("tensor '" + name + "': delta container holds a packed blob");
    }
    DeltaTensor d;
    d.name = name;
    d.source_dtype = entry.dtype;
    if (dtypes && dtypes->contains(name)) {
      d.source_dtype = parse_dtype((*dtypes)[name].get<std::string>());
    }
    d.shape = entry.shape;
    d.data = entry.to_matrix();
    check_finite(d.data, name);
    (filter.accepts(name, entry) ? out.compressible : out.passthrough).push_back(std::move(d));
  }
  return out;
}

TensorContainer delta_container(const DeltaSet& deltas) {
  TensorContainer out;
  json dtypes = json::object();
  auto add = [&](const DeltaTensor& d) {
    out.tensors[d.name] = TensorEntry::from_floats(
        std::span<const float>(d.data.data(), static_cast<std::size_t>(d.data.size())),
        d.shape, DType::kF32);
    dtypes[d.name] = std::string(dtype_name(d.source_dtype));
  };
  for (const auto& d : deltas.compressible) add(d);
  for (const auto& d : deltas.passthrough) add(d);
  out.metadata = {{"format_version", 1}, {"kind", "delta"}, {"source_dtypes", dtypes}};
  return out;
}

// ---------------------------------------------------------------------------

double compression_ratio(double original_param_count,
                         double stored_equiv_16bit_count) {
  if (!(stored_equiv_16bit_count > 0.0)) {
    throw ConfigError("stored entry count must be positive");
  }
  return original_param_count / stored_equiv_16bit_count;
}

double factorized_storage_count(std::int64_t rows, std::int64_t cols,
                                std::span<const double> keep_fractions) {
  double total = 0.0;
  for (double keep : keep_fractions) {
    total += static_cast<double>(rows + cols) * keep + 1.0;
  }
  return total;
}

double quantized_storage_count(std::int64_t rows, std::int64_t cols,
                               std::span<const double> keep_fractions,
                               std::span<const int> bits) {
  if (bits.size() != keep_fractions.size()) {
    throw ConfigError("bit widths and keep fractions differ in length");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < keep_fractions.size(); ++k) {
    total += static_cast<double>(rows + cols) * keep_fractions[k] * bits[k] / 16.0 + 1.0;
  }
  return total;
}

}  // namespace deltapress
