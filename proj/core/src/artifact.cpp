#include "deltapress/artifact.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>

#include "deltapress/bitpack.hpp"
#include "deltapress/error.hpp"
#include "deltapress/rng.hpp"
#include "deltapress/svd.hpp"

namespace deltapress {
namespace {

using json = nlohmann::json;

std::string part(const std::string& name, std::string_view suffix) {
  return name + ":" + std::string(suffix);
}

void put_f16(std::vector<std::uint8_t>& out, float v) {
  const auto bits = f16_bits(v);
  out.push_back(static_cast<std::uint8_t>(bits));
  out.push_back(static_cast<std::uint8_t>(bits >> 8));
}

float get_f16(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + 2 > in.size()) throw DataError("f16 value truncated at offset " + std::to_string(pos));
  const auto bits = static_cast<std::uint16_t>(in[pos] | (in[pos + 1] << 8));
  pos += 2;
  return f16_value(bits);
}

std::vector<float> f16_vector(const TensorEntry& e) {
  if (e.dtype != DType::kF16) throw DataError("expected an f16 tensor");
  return e.to_floats();
}

const json& require(const json& record, const char* key) {
  if (!record.contains(key)) {
    throw DataError(std::string("manifest record lacks '") + key + "'");
  }
  return record[key];
}

const TensorEntry& packed_part(const TensorContainer& artifact, const std::string& name) {
  const auto& e = artifact.at(name);
  if (e.dtype != DType::kU8Packed) throw DataError("'" + name + "' must be u8-packed");
  return e;
}

json quant_to_json(const QuantConfig& q) {
  json groups = json::array();
  for (const auto& g : q.groups) groups.push_back({g.count, g.bits});
  return {{"groups", groups}, {"blocksize", q.blocksize}, {"damping", q.damping}};
}

QuantConfig quant_from_json(const json& j) {
  QuantConfig q;
  q.groups.clear();
  for (const auto& g : j.at("groups")) q.groups.push_back({g.at(0).get<int>(), g.at(1).get<int>()});
  q.blocksize = j.at("blocksize").get<int>();
  q.damping = j.at("damping").get<double>();
  q.validate();
  return q;
}

std::int32_t code_offset(int bits) { return (1 << (bits - 1)) - 1; }

struct PlanHeader {
  SparsifyConfig config;
  double gamma = 0.0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index rank = 0;
  Eigen::Index kept = 0;
};

json plan_record(const SparseFactors& f, const std::vector<std::int64_t>& shape, DType dtype,
                 std::string_view method) {
  std::vector<double> kept_p;
  for (const auto& c : f.columns) kept_p.push_back(c.p);
  return {{"method", std::string(method)},
          {"shape", shape},
          {"dtype", std::string(dtype_name(dtype))},
          {"alpha", f.config.alpha},
          {"beta", f.config.beta},
          {"c", f.config.c},
          {"gamma", f.plan.gamma},
          {"rank", f.rank},
          {"kept", f.columns.size()},
          {"salt", f.config.salt},
          {"plan_digest", plan_digest(kept_p)}};
}

PlanHeader read_plan_header(const json& record) {
  PlanHeader h;
  const auto& shape = require(record, "shape");
  if (!shape.is_array() || shape.size() != 2) throw DataError("factorized record needs a 2-D shape");
  h.rows = shape[0].get<Eigen::Index>();
  h.cols = shape[1].get<Eigen::Index>();
  h.config.alpha = require(record, "alpha").get<double>();
  h.config.beta = require(record, "beta").get<double>();
  h.config.c = require(record, "c").get<double>();
  h.config.salt = require(record, "salt").get<std::string>();
  h.gamma = require(record, "gamma").get<double>();
  h.rank = require(record, "rank").get<Eigen::Index>();
  h.kept = require(record, "kept").get<Eigen::Index>();
  if (h.rank != std::min(h.rows, h.cols) || h.kept < 0 || h.kept > h.rank) {
    throw DataError("inconsistent rank / kept column counts");
  }
  return h;
}

// Recomputes the kept columns' sparsity from the stored sigma and checks the
// plan digest, which catches any drift in how the plan is derived.
std::vector<double> replay_plan(const PlanHeader& h, const std::vector<float>& sigma,
                                const json& record) {
  std::vector<double> p;
  p.reserve(sigma.size());
  for (float s : sigma) p.push_back(importance_sparsity(s, sigma.front(), h.config.c, h.gamma));
  if (plan_digest(p) != require(record, "plan_digest").get<std::string>()) {
    throw DataError("plan digest mismatch: stored sigma does not reproduce the sparsity plan");
  }
  for (double v : p) {
    if (!(v < 1.0)) throw DataError("stored column has sparsity 1");
  }
  return p;
}

SparsityPlan replayed_plan(const PlanHeader& h, const std::vector<double>& kept_p) {
  SparsityPlan plan;
  plan.p.assign(static_cast<std::size_t>(h.rank), 1.0);
  std::copy(kept_p.begin(), kept_p.end(), plan.p.begin());
  plan.gamma = h.gamma;
  plan.kept_columns = h.kept;
  plan.empty = h.kept == 0;
  plan.factor_target = h.config.alpha == 0.0 ? 0.0 : factor_target(h.config.alpha, h.rows, h.cols);
  return plan;
}

std::vector<std::uint32_t> regenerate(float sigma, const std::string& salt, Factor which,
                                      Eigen::Index length, double p, std::uint64_t stored_count) {
  auto idx = mask_indices(mask_seed(sigma, salt, which), length, 1.0 - p);
  if (idx.size() != stored_count) {
    throw DataError("regenerated mask keeps " + std::to_string(idx.size()) +
                    " entries but the record stores " + std::to_string(stored_count));
  }
  return idx;
}

std::vector<double> quantiles(std::vector<double> v) {
  if (v.empty()) return {};
  std::sort(v.begin(), v.end());
  std::vector<double> out;
  for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto idx = static_cast<std::size_t>(std::llround(q * static_cast<double>(v.size() - 1)));
    out.push_back(v[idx]);
  }
  return out;
}

std::size_t entry_bytes(const TensorContainer& c, const std::string& name) {
  std::size_t total = 0;
  const std::string prefix = name + ":";
  for (auto it = c.tensors.lower_bound(prefix);
       it != c.tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
    total += it->second.bytes.size();
  }
  return total;
}

Matrix decode_record(const std::string& name, const TensorContainer& artifact,
                     const json& record);

}  // namespace

std::string_view method_name(Method method) {
  switch (method) {
    case Method::kImpart:
      return "impart";
    case Method::kDare:
      return "dare";
    case Method::kLowRank:
      return "lowrank";
    case Method::kImpartQt:
      return "impart-qt";
    case Method::kDense:
      return "dense";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  if (name == "impart") return Method::kImpart;
  if (name == "dare") return Method::kDare;
  if (name == "lowrank") return Method::kLowRank;
  if (name == "impart-qt") return Method::kImpartQt;
  if (name == "dense") return Method::kDense;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

void CompressOptions::validate() const {
  using Kind = CompressTarget::Kind;
  if (target.kind == Kind::kAlpha && !(target.value >= 0.0 && target.value < 1.0)) {
    throw ConfigError("alpha must lie in [0, 1), got " + std::to_string(target.value));
  }
  if (target.kind != Kind::kAlpha && !(target.value >= 1.0)) {
    throw ConfigError("compression ratio must be at least 1, got " + std::to_string(target.value));
  }
  if (target.kind == Kind::kCrQt && method != Method::kImpartQt) {
    throw ConfigError("a CR_qt target requires method impart-qt");
  }
  SparsifyConfig{0.5, beta, c, ""}.validate();
  if (method == Method::kImpartQt) quant.validate();
  if (threads < 1) throw ConfigError("thread count must be positive");
}

std::string plan_digest(std::span<const double> kept_p) {
  std::uint64_t h = kFnvOffset;
  for (double p : kept_p) {
    const auto bits = std::bit_cast<std::uint64_t>(p);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= kFnvPrime;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------

json encode_sparse(const std::string& name, DType dtype, const SparseFactors& f,
                   TensorContainer& out) {
  std::vector<float> sigma;
  std::vector<std::uint8_t> u_blob;
  std::vector<std::uint8_t> v_blob;
  for (const auto& c : f.columns) {
    sigma.push_back(c.sigma);
    append_varint(u_blob, c.u_value.size());
    for (float v : c.u_value) put_f16(u_blob, v);
    append_varint(v_blob, c.v_value.size());
    for (float v : c.v_value) put_f16(v_blob, v);
  }
  out.tensors[part(name, "sigma")] = TensorEntry::from_floats(
      sigma, {static_cast<std::int64_t>(sigma.size())}, DType::kF16);
  out.tensors[part(name, "u")] = TensorEntry::packed(std::move(u_blob));
  out.tensors[part(name, "v")] = TensorEntry::packed(std::move(v_blob));
  return plan_record(f, {f.rows, f.cols}, dtype, "impart");
}

SparseFactors decode_sparse(const std::string& name, const TensorContainer& artifact,
                            const json& record) {
  const auto h = read_plan_header(record);
  const auto sigma = f16_vector(artifact.at(part(name, "sigma")));
  if (static_cast<Eigen::Index>(sigma.size()) != h.kept) throw DataError("sigma length differs from kept count");
  const auto p = replay_plan(h, sigma, record);
  const auto& u_blob = packed_part(artifact, part(name, "u")).bytes;
  const auto& v_blob = packed_part(artifact, part(name, "v")).bytes;

  SparseFactors f;
  f.rows = h.rows;
  f.cols = h.cols;
  f.rank = h.rank;
  f.config = h.config;
  f.plan = replayed_plan(h, p);
  std::size_t upos = 0;
  std::size_t vpos = 0;
  for (Eigen::Index k = 0; k < h.kept; ++k) {
    SparseColumn c;
    c.sigma = sigma[static_cast<std::size_t>(k)];
    c.p = p[static_cast<std::size_t>(k)];
    const auto nu = read_varint(u_blob, upos);
    c.u_index = regenerate(c.sigma, h.config.salt, Factor::kU, h.rows, c.p, nu);
    for (std::uint64_t t = 0; t < nu; ++t) c.u_value.push_back(get_f16(u_blob, upos));
    const auto nv = read_varint(v_blob, vpos);
    c.v_index = regenerate(c.sigma, h.config.salt, Factor::kV, h.cols, c.p, nv);
    for (std::uint64_t t = 0; t < nv; ++t) c.v_value.push_back(get_f16(v_blob, vpos));
    f.columns.push_back(std::move(c));
  }
  if (upos != u_blob.size() || vpos != v_blob.size()) {
    throw DataError("factor blob has trailing bytes");
  }
  return f;
}

namespace {

void append_codes(std::vector<std::uint8_t>& blob, int bits, float scale,
                  const std::vector<std::int32_t>& codes) {
  blob.push_back(static_cast<std::uint8_t>(bits));
  put_f16(blob, scale);
  put_f16(blob, 0.0f);  // zero point; the grid is symmetric
  append_varint(blob, codes.size());
  std::vector<std::uint32_t> raw;
  raw.reserve(codes.size());
  for (auto c : codes) raw.push_back(static_cast<std::uint32_t>(c + code_offset(bits)));
  const auto packed = pack_codes(raw, bits);
  blob.insert(blob.end(), packed.begin(), packed.end());
}

struct CodeRun {
  int bits = 0;
  float scale = 0.0f;
  std::uint64_t count = 0;
  std::vector<std::int32_t> codes;
};

CodeRun read_codes(std::span<const std::uint8_t> blob, std::size_t& pos) {
  CodeRun run;
  if (pos >= blob.size()) throw DataError("quantized column header truncated");
  run.bits = blob[pos++];
  if (!is_supported_bit_width(run.bits)) throw DataError("unsupported bit width tag");
  run.scale = get_f16(blob, pos);
  if (get_f16(blob, pos) != 0.0f) throw DataError("non-zero zero point in a symmetric code stream");
  run.count = read_varint(blob, pos);
  const auto size = packed_size(run.count, run.bits);
  if (pos + size > blob.size()) throw DataError("quantized code stream truncated");
  const auto raw = unpack_codes(blob.subspan(pos, size), run.bits, run.count);
  pos += size;
  const auto limit = 2 * code_offset(run.bits);
  for (auto r : raw) {
    if (static_cast<std::int32_t>(r) > limit) throw DataError("code outside the symmetric grid");
    run.codes.push_back(static_cast<std::int32_t>(r) - code_offset(run.bits));
  }
  return run;
}

}  // namespace

json encode_quantized(const std::string& name, DType dtype, const QuantizedFactors& f,
                      TensorContainer& out) {
  std::vector<float> sigma;
  std::vector<std::uint8_t> u_blob;
  std::vector<std::uint8_t> v_blob;
  for (const auto& c : f.columns) {
    sigma.push_back(c.sigma);
    append_codes(u_blob, c.bits, c.u_scale, c.u_codes);
    append_codes(v_blob, c.bits, c.v_scale, c.v_codes);
  }
  out.tensors[part(name, "sigma")] = TensorEntry::from_floats(
      sigma, {static_cast<std::int64_t>(sigma.size())}, DType::kF16);
  out.tensors[part(name, "qu")] = TensorEntry::packed(std::move(u_blob));
  out.tensors[part(name, "qv")] = TensorEntry::packed(std::move(v_blob));

  SparseFactors header;
  header.rows = f.rows;
  header.cols = f.cols;
  header.rank = f.rank;
  header.config = f.config;
  header.plan = f.plan;
  for (const auto& c : f.columns) header.columns.push_back({c.sigma, c.p, {}, {}, {}, {}});
  auto record = plan_record(header, {f.rows, f.cols}, dtype, "impart-qt");
  record["quant"] = quant_to_json(f.quant);
  return record;
}

QuantizedFactors decode_quantized(const std::string& name, const TensorContainer& artifact,
                                  const json& record) {
  const auto h = read_plan_header(record);
  QuantConfig quant;
  try {
    quant = quant_from_json(require(record, "quant"));
  } catch (const json::exception& e) {
    throw DataError(std::string("bad quantization record: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("bad quantization record: ") + e.what());
  }
  const auto sigma = f16_vector(artifact.at(part(name, "sigma")));
  if (static_cast<Eigen::Index>(sigma.size()) != h.kept) throw DataError("sigma length differs from kept count");
  const auto p = replay_plan(h, sigma, record);
  const auto bits = column_bits(quant, h.kept);
  const auto& u_blob = packed_part(artifact, part(name, "qu")).bytes;
  const auto& v_blob = packed_part(artifact, part(name, "qv")).bytes;

  QuantizedFactors f;
  f.rows = h.rows;
  f.cols = h.cols;
  f.rank = h.rank;
  f.config = h.config;
  f.plan = replayed_plan(h, p);
  f.quant = quant;
  std::size_t upos = 0;
  std::size_t vpos = 0;
  for (Eigen::Index k = 0; k < h.kept; ++k) {
    QuantizedColumn c;
    c.sigma = sigma[static_cast<std::size_t>(k)];
    c.p = p[static_cast<std::size_t>(k)];
    auto u = read_codes(u_blob, upos);
    auto v = read_codes(v_blob, vpos);
    c.bits = bits[static_cast<std::size_t>(k)];
    if (u.bits != c.bits || v.bits != c.bits) throw DataError("bit width tag disagrees with the group table");
    c.u_index = regenerate(c.sigma, h.config.salt, Factor::kU, h.rows, c.p, u.count);
    c.v_index = regenerate(c.sigma, h.config.salt, Factor::kV, h.cols, c.p, v.count);
    c.u_scale = u.scale;
    c.v_scale = v.scale;
    c.u_codes = std::move(u.codes);
    c.v_codes = std::move(v.codes);
    f.columns.push_back(std::move(c));
  }
  if (upos != u_blob.size() || vpos != v_blob.size()) {
    throw DataError("quantized blob has trailing bytes");
  }
  return f;
}

// ---------------------------------------------------------------------------

ByteEstimate impart_payload_estimate(const SparsityPlan& plan, Eigen::Index rows,
                                     Eigen::Index cols) {
  ByteEstimate e;
  double var = 0.0;
  const auto header = static_cast<double>(2 + varint_size(static_cast<std::uint64_t>(rows)) +
                                          varint_size(static_cast<std::uint64_t>(cols)));
  for (Eigen::Index k = 0; k < plan.kept_columns; ++k) {
    const double keep = 1.0 - plan.p[static_cast<std::size_t>(k)];
    const auto entries = static_cast<double>(rows + cols);
    e.mean += header + 2.0 * entries * keep;
    var += 4.0 * entries * keep * (1.0 - keep);
  }
  e.stddev = std::sqrt(var);
  return e;
}

double impart_alpha_for_budget(std::span<const double> sigma, double cr,
                               const SparsifyConfig& config, Eigen::Index rows,
                               Eigen::Index cols) {
  const double budget = 2.0 * static_cast<double>(rows) * static_cast<double>(cols) / cr;
  SparsifyConfig cfg = config;
  auto fits = [&](double alpha) {
    cfg.alpha = alpha;
    const auto plan = allocate_sparsity(sigma, cfg, rows, cols);
    const auto est = impart_payload_estimate(plan, rows, cols);
    return est.mean + 4.0 * est.stddev <= budget;
  };
  // Start from the nominal ratio; never go below it.
  double low = 1.0 - 1.0 / cr;
  if (fits(low)) return low;
  double high = 1.0 - 1e-12;
  if (!fits(high)) {
    throw ConfigError("storage budget for CR " + std::to_string(cr) + " is unreachable");
  }
  for (int it = 0; it < 64 && high - low > 1e-9; ++it) {
    const double mid = 0.5 * (low + high);
    (fits(mid) ? high : low) = mid;
  }
  return high;
}

double dare_rate_for_budget(Eigen::Index rows, Eigen::Index cols, double cr) {
  const double n = static_cast<double>(rows) * static_cast<double>(cols);
  const double budget = n / cr;  // in entries
  auto fits = [&](double keep) { return n * keep + 4.0 * std::sqrt(n * keep * (1.0 - keep)) <= budget; };
  double low = 0.0;           // keep fraction that fits
  double high = 1.0 / cr;     // nominal keep, may not fit
  if (fits(high)) return 1.0 - high;
  for (int it = 0; it < 64 && high - low > 1e-12; ++it) {
    const double mid = 0.5 * (low + high);
    (fits(mid) ? low : high) = mid;
  }
  return 1.0 - low;
}

// ---------------------------------------------------------------------------

double CompressResult::original_bytes() const {
  double total = 0.0;
  for (const auto& t : tensors) total += t.original_bytes;
  return total;
}

double CompressResult::payload_bytes() const {
  double total = 0.0;
  for (const auto& t : tensors) total += static_cast<double>(t.payload_bytes);
  return total;
}

double CompressResult::achieved_cr() const {
  const double stored = payload_bytes();
  return stored > 0.0 ? original_bytes() / stored : std::numeric_limits<double>::infinity();
}

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

json TensorReport::to_json() const {
  json out = {{"name", name},
              {"method", std::string(method_name(method))},
              {"shape", {rows, cols}},
              {"alpha", alpha},
              {"original_bytes", original_bytes},
              {"payload_bytes", payload_bytes},
              {"stored_entries", stored_entries},
              {"achieved_cr", finite_or_null(achieved_cr)},
              {"rel_error", rel_error}};
  if (method == Method::kImpart || method == Method::kImpartQt) {
    out["plan"] = {{"rank", rank},
                   {"preprune_boundary", preprune_boundary},
                   {"kept_columns", kept_columns},
                   {"gamma", gamma},
                   {"p_quantiles", p_quantiles}};
  }
  return out;
}

json CompressResult::report() const {
  json list = json::array();
  for (const auto& t : tensors) list.push_back(t.to_json());
  return {{"schema_version", 1},
          {"tensors", list},
          {"totals",
           {{"original_bytes", original_bytes()},
            {"payload_bytes", payload_bytes()},
            {"header_bytes", serialize_container(artifact).size() -
                                 static_cast<std::size_t>(payload_bytes()) - 8},
            {"achieved_cr", finite_or_null(achieved_cr())}}}};
}

namespace {

struct Encoded {
  TensorContainer parts;
  json record;
  TensorReport report;
};

void fill_plan_report(TensorReport& r, const SparsityPlan& plan, Eigen::Index rank) {
  r.rank = rank;
  r.preprune_boundary = plan.preprune_boundary;
  r.kept_columns = plan.kept_columns;
  r.gamma = plan.gamma;
  r.p_quantiles = quantiles({plan.p.begin(), plan.p.begin() + plan.kept_columns});
}

Encoded encode_dense(const DeltaTensor& d) {
  Encoded e;
  e.parts.tensors[part(d.name, "delta")] = TensorEntry::from_floats(
      std::span<const float>(d.data.data(), static_cast<std::size_t>(d.data.size())), d.shape,
      DType::kF32);
  e.record = {{"method", "dense"}, {"shape", d.shape}, {"dtype", std::string(dtype_name(d.source_dtype))}};
  e.report.method = Method::kDense;
  e.report.stored_entries = static_cast<std::size_t>(d.data.size());
  return e;
}

Encoded encode_one(const DeltaTensor& d, const CompressOptions& opt) {
  const auto m = d.rows();
  const auto n = d.cols();
  const std::string salt = opt.salt.empty() ? d.name : opt.salt + ":" + d.name;
  const auto kind = opt.target.kind;
  Encoded e;
  e.report.method = opt.method;

  switch (opt.method) {
    case Method::kDense:
      return encode_dense(d);

    case Method::kDare: {
      const double p = kind == CompressTarget::Kind::kCr ? dare_rate_for_budget(m, n, opt.target.value)
                                                         : opt.target.value;
      const Matrix sparse = dare_sparsify(d.data, p, salt);
      const auto idx = mask_indices(dare_seed(salt), d.data.size(), 1.0 - p);
      std::vector<float> values;
      values.reserve(idx.size());
      for (auto i : idx) values.push_back(sparse.data()[i]);
      e.parts.tensors[part(d.name, "values")] = TensorEntry::from_floats(
          values, {static_cast<std::int64_t>(values.size())}, DType::kF16);
      e.record = {{"method", "dare"},
                  {"shape", {m, n}},
                  {"dtype", std::string(dtype_name(d.source_dtype))},
                  {"p", p},
                  {"salt", salt},
                  {"kept", values.size()}};
      e.report.alpha = p;
      e.report.stored_entries = values.size();
      return e;
    }

    case Method::kLowRank: {
      const double alpha = kind == CompressTarget::Kind::kCr ? 1.0 - 1.0 / opt.target.value
                                                             : opt.target.value;
      const auto f = truncate_lowrank(svd(d.data, d.name), alpha);
      const auto r = f.rank();
      std::vector<float> u(static_cast<std::size_t>(m * r));
      std::vector<float> v(static_cast<std::size_t>(n * r));
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index k = 0; k < r; ++k) u[static_cast<std::size_t>(i * r + k)] = f.u(i, k);
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index k = 0; k < r; ++k) v[static_cast<std::size_t>(j * r + k)] = f.v(j, k);
      e.parts.tensors[part(d.name, "u")] = TensorEntry::from_floats(u, {m, r}, DType::kF16);
      e.parts.tensors[part(d.name, "v")] = TensorEntry::from_floats(v, {n, r}, DType::kF16);
      e.parts.tensors[part(d.name, "sigma")] = TensorEntry::from_floats(f.sigma, {r}, DType::kF16);
      e.record = {{"method", "lowrank"},
                  {"shape", {m, n}},
                  {"dtype", std::string(dtype_name(d.source_dtype))},
                  {"alpha", alpha},
                  {"rank", r}};
      e.report.alpha = alpha;
      e.report.rank = r;
      e.report.stored_entries = static_cast<std::size_t>(r * (m + n + 1));
      return e;
    }

    case Method::kImpart:
    case Method::kImpartQt: {
      const auto factors = svd(d.data, d.name);
      const auto sigma = stored_sigma(factors);
      SparsifyConfig cfg{0.0, opt.beta, opt.c, salt};
      if (kind == CompressTarget::Kind::kAlpha) {
        cfg.alpha = opt.target.value;
      } else if (kind == CompressTarget::Kind::kCr) {
        cfg.alpha = opt.method == Method::kImpart
                        ? impart_alpha_for_budget(sigma, opt.target.value, cfg, m, n)
                        : 1.0 - 1.0 / opt.target.value;
      } else {
        cfg.alpha = solve_alpha_for_cr(sigma, opt.target.value, opt.quant, cfg, m, n).alpha;
      }
      const auto plan = allocate_sparsity(sigma, cfg, m, n);
      const auto sparse = sparsify(factors, plan, cfg);
      e.report.alpha = cfg.alpha;
      fill_plan_report(e.report, plan, factors.rank());
      e.report.stored_entries = sparse.stored_entry_count();
      if (opt.method == Method::kImpart) {
        e.record = encode_sparse(d.name, d.source_dtype, sparse, e.parts);
      } else {
        auto it = opt.calibration.find(d.name);
        const MatrixD none;
        const auto q = quantize_artifact(sparse, opt.quant, it == opt.calibration.end() ? none : it->second);
        e.record = encode_quantized(d.name, d.source_dtype, q, e.parts);
        e.record["calibrated"] = it != opt.calibration.end();
      }
      return e;
    }
  }
  throw ConfigError("unhandled method");
}

}  // namespace

CompressResult compress(const DeltaSet& deltas, const CompressOptions& options,
                        const std::string& base_digest) {
  options.validate();
  std::vector<const DeltaTensor*> all;
  for (const auto& d : deltas.compressible) all.push_back(&d);
  for (const auto& d : deltas.passthrough) all.push_back(&d);
  std::sort(all.begin(), all.end(),
            [](const DeltaTensor* a, const DeltaTensor* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < all.size(); ++i) {
    if (all[i]->name == all[i - 1]->name) throw ConfigError("duplicate tensor '" + all[i]->name + "'");
  }

  std::vector<Encoded> encoded(all.size());
  parallel_for(all.size(), options.threads, [&](std::size_t i) {
    const DeltaTensor& d = *all[i];
    const bool compressible = std::any_of(deltas.compressible.begin(), deltas.compressible.end(),
                                          [&](const DeltaTensor& c) { return &c == &d; });
    try {
      encoded[i] = compressible ? encode_one(d, options) : encode_dense(d);
      auto& r = encoded[i].report;
      r.name = d.name;
      r.rows = d.rows();
      r.cols = d.cols();
      r.original_bytes = 2.0 * static_cast<double>(d.data.size());
      r.payload_bytes = entry_bytes(encoded[i].parts, d.name);
      r.achieved_cr = r.payload_bytes > 0 ? r.original_bytes / static_cast<double>(r.payload_bytes)
                                          : std::numeric_limits<double>::infinity();
      const Matrix decoded = decode_record(d.name, encoded[i].parts, encoded[i].record);
      r.rel_error = relative_frobenius_error(decoded, d.data);
    } catch (const Error& e) {
      rethrow_with_tensor(e, d.name);
    }
  });

  CompressResult result;
  json records = json::object();
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (auto& [k, v] : encoded[i].parts.tensors) result.artifact.tensors[k] = std::move(v);
    records[all[i]->name] = std::move(encoded[i].record);
    result.tensors.push_back(std::move(encoded[i].report));
  }
  result.artifact.metadata = {{"format_version", kFormatVersion},
                              {"kind", "artifact"},
                              {"base_digest", base_digest},
                              {"records", records}};
  return result;
}

// ---------------------------------------------------------------------------

bool is_artifact(const TensorContainer& container) {
  return container.metadata.is_object() && container.metadata.value("kind", "") == "artifact";
}

namespace {

Matrix decode_record(const std::string& name, const TensorContainer& artifact,
                     const json& record) {
  const auto method = parse_method(require(record, "method").get<std::string>());
  switch (method) {
    case Method::kImpart:
      return reconstruct(decode_sparse(name, artifact, record));
    case Method::kImpartQt:
      return reconstruct(decode_quantized(name, artifact, record).dequantize());
    case Method::kDense:
      return artifact.at(part(name, "delta")).to_matrix();
    case Method::kLowRank: {
      const auto& u = artifact.at(part(name, "u"));
      const auto& v = artifact.at(part(name, "v"));
      const auto s = f16_vector(artifact.at(part(name, "sigma")));
      if (u.shape.size() != 2 || v.shape.size() != 2 ||
          u.shape[1] != static_cast<std::int64_t>(s.size()) || v.shape[1] != u.shape[1]) {
        throw DataError("low-rank factor shapes disagree");
      }
      SvdFactors f;
      f.u = u.to_matrix();
      f.v = v.to_matrix();
      f.sigma = s;
      return reconstruct(f);
    }
    case Method::kDare: {
      const auto& shape = require(record, "shape");
      const auto m = shape.at(0).get<Eigen::Index>();
      const auto n = shape.at(1).get<Eigen::Index>();
      const double p = require(record, "p").get<double>();
      const auto salt = require(record, "salt").get<std::string>();
      const auto values = f16_vector(artifact.at(part(name, "values")));
      const auto idx = mask_indices(dare_seed(salt), m * n, 1.0 - p);
      if (idx.size() != values.size()) {
        throw DataError("regenerated DARE mask keeps " + std::to_string(idx.size()) +
                        " entries but the record stores " + std::to_string(values.size()));
      }
      Matrix out = Matrix::Zero(m, n);
      for (std::size_t t = 0; t < idx.size(); ++t) out.data()[idx[t]] = values[t];
      return out;
    }
  }
  throw DataError("unhandled record method");
}

}  // namespace

std::map<std::string, DecodedDelta> decode_artifact(const TensorContainer& artifact, int threads) {
  if (!is_artifact(artifact)) throw DataError("container is not a compressed artifact");
  const auto& meta = artifact.metadata;
  if (meta.value("format_version", 0) != kFormatVersion) {
    throw DataError("unsupported artifact format_version");
  }
  const auto& records = require(meta, "records");
  std::vector<std::string> names;
  for (const auto& [name, rec] : records.items()) names.push_back(name);

  std::vector<DecodedDelta> decoded(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    const auto& rec = records[names[i]];
    try {
      auto& out = decoded[i];
      out.shape = require(rec, "shape").get<std::vector<std::int64_t>>();
      out.dtype = parse_dtype(require(rec, "dtype").get<std::string>());
      out.data = decode_record(names[i], artifact, rec);
      std::int64_t count = 1;
      for (auto d : out.shape) count *= d;
      if (count != out.data.size()) throw DataError("decoded size does not match the recorded shape");
    } catch (const Error& e) {
      rethrow_with_tensor(e, names[i]);
    } catch (const json::exception& e) {
      rethrow_with_tensor(DataError(std::string("bad manifest record: ") + e.what()), names[i]);
    }
  });
  std::map<std::string, DecodedDelta> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace(names[i], std::move(decoded[i]));
  return out;
}

TensorContainer reconstruct_checkpoint(const TensorContainer& artifact, const TensorContainer& base,
                                       const std::string& base_digest, bool force, int threads) {
  if (!is_artifact(artifact)) throw DataError("container is not a compressed artifact");
  const auto recorded = artifact.metadata.value("base_digest", "");
  if (!force && recorded != base_digest) {
    throw DataError(recorded.empty()
                        ? "artifact records no base digest; pass --force to reconstruct anyway"
                        : "base checkpoint digest " + base_digest +
                              " does not match the artifact's " + recorded);
  }
  const auto deltas = decode_artifact(artifact, threads);
  TensorContainer out;
  for (const auto& [name, d] : deltas) {
    if (!base.contains(name)) throw DataError("artifact tensor '" + name + "' is missing from the base");
  }
  for (const auto& [name, entry] : base.tensors) {
    auto it = deltas.find(name);
    if (it == deltas.end()) {
      out.tensors[name] = entry;
      continue;
    }
    if (it->second.shape != entry.shape) {
      throw DataError("tensor '" + name + "': base shape differs from the artifact record");
    }
    const Matrix w = entry.to_matrix() + it->second.data;
    out.tensors[name] = TensorEntry::from_floats(
        std::span<const float>(w.data(), static_cast<std::size_t>(w.size())), entry.shape,
        it->second.dtype);
  }
  return out;
}

}  // namespace deltapress
