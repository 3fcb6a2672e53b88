#include "commands.hpp"

#include <fstream>
#include <iostream>
#include <regex>

#include "deltapress/artifact.hpp"
#include "deltapress/digest.hpp"
#include "deltapress/error.hpp"
#include "deltapress/merge.hpp"
#include "deltapress/svd.hpp"
#include "deltapress/synthetic.hpp"
#include "deltapress/tensor_store.hpp"

namespace deltapress::cli {
namespace {

using json = nlohmann::json;

std::string need(const json& cfg, const char* key) {
  const auto& v = cfg.at(key);
  if (v.is_null() || (v.is_string() && v.get<std::string>().empty())) {
    throw ConfigError(std::string("--") + key + " is required");
  }
  return v.get<std::string>();
}

std::optional<std::string> maybe(const json& cfg, const char* key) {
  const auto& v = cfg.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<std::string>();
}

int threads_of(const json& cfg) {
  const auto& v = cfg.at("threads");
  const int t = v.is_null() ? default_thread_count() : v.get<int>();
  if (t < 1) throw ConfigError("--threads must be positive");
  return t;
}

DeltaFilter filter_of(const json& cfg) {
  DeltaFilter f;
  if (auto pattern = maybe(cfg, "include")) {
    try {
      f.include = std::regex(*pattern);
    } catch (const std::regex_error& e) {
      throw ConfigError("--include: invalid regular expression: " + std::string(e.what()));
    }
  }
  return f;
}

std::string file_digest(const std::string& path) { return sha256_hex(read_file_bytes(path)); }

void emit(const json& report, const std::optional<std::string>& path) {
  if (!path) {
    std::cout << report.dump(2) << '\n';
    return;
  }
  std::ofstream out(*path);
  if (!out) throw ConfigError("cannot write report '" + *path + "'");
  out << report.dump(2) << '\n';
}

// "2:8,32:3,0:2" -> groups of (count, bits); count 0 means the rest.
std::vector<BitGroup> parse_bit_groups(const std::string& text) {
  std::vector<BitGroup> groups;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("--bit-groups: expected count:bits, got '" + item + "'");
    try {
      groups.push_back({std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("--bit-groups: cannot parse '" + item + "'");
    }
  }
  return groups;
}

CompressTarget target_of(const json& cfg, Method method) {
  std::vector<CompressTarget> given;
  if (!cfg.at("alpha").is_null()) given.push_back(CompressTarget::alpha(cfg["alpha"].get<double>()));
  if (!cfg.at("cr").is_null()) given.push_back(CompressTarget::cr(cfg["cr"].get<double>()));
  if (!cfg.at("cr-qt").is_null()) given.push_back(CompressTarget::cr_qt(cfg["cr-qt"].get<double>()));
  if (given.size() > 1) throw ConfigError("--alpha, --cr and --cr-qt are mutually exclusive");
  if (given.empty()) {
    if (method == Method::kDense) return CompressTarget::alpha(0.0);
    throw ConfigError("one of --alpha, --cr or --cr-qt is required");
  }
  return given.front();
}

std::map<std::string, MatrixD> load_calibration(const std::string& path) {
  std::map<std::string, MatrixD> out;
  for (const auto& [name, entry] : read_container(path).tensors) {
    if (!entry.is_matrix()) throw DataError("calibration tensor '" + name + "' must be 2-D");
    out[name] = entry.to_matrix().cast<double>();
  }
  return out;
}

TensorMap to_tensor_map(const TensorContainer& c) {
  TensorMap out;
  for (const auto& [name, entry] : c.tensors) {
    if (entry.dtype == DType::kU8Packed) continue;
    out[name] = entry.to_matrix();
  }
  return out;
}

TensorMap delta_map(const DeltaSet& set) {
  TensorMap out;
  for (const auto* part : {&set.compressible, &set.passthrough}) {
    for (const auto& d : *part) out[d.name] = d.data;
  }
  return out;
}

}  // namespace

int cmd_delta(const json& cfg) {
  const auto base_path = need(cfg, "base");
  const auto base = read_container(base_path);
  const auto ft = read_container(need(cfg, "finetuned"));
  auto out = delta_container(compute_delta(base, ft, filter_of(cfg)));
  out.metadata["base_digest"] = file_digest(base_path);
  write_container(need(cfg, "output"), out);
  return 0;
}

int cmd_compress(const json& cfg) {
  CompressOptions opt;
  opt.method = parse_method(need(cfg, "method"));
  opt.target = target_of(cfg, opt.method);
  opt.beta = cfg.at("beta").get<double>();
  opt.c = cfg.at("c").get<double>();
  opt.quant.groups = parse_bit_groups(cfg.at("bit-groups").get<std::string>());
  opt.quant.blocksize = cfg.at("blocksize").get<int>();
  opt.quant.damping = cfg.at("damping").get<double>();
  opt.salt = cfg.at("seed-salt").get<std::string>();
  opt.threads = threads_of(cfg);
  if (auto path = maybe(cfg, "calibration")) {
    if (opt.method != Method::kImpartQt) throw ConfigError("--calibration applies to impart-qt only");
    opt.calibration = load_calibration(*path);
  }
  opt.validate();

  const auto filter = filter_of(cfg);
  DeltaSet deltas;
  std::string digest;
  if (auto delta_path = maybe(cfg, "delta")) {
    if (maybe(cfg, "finetuned")) throw ConfigError("give either --delta or --base with --finetuned");
    const auto container = read_container(*delta_path);
    deltas = split_delta_container(container, filter);
    if (container.metadata.is_object()) digest = container.metadata.value("base_digest", "");
  } else {
    const auto base_path = need(cfg, "base");
    digest = file_digest(base_path);
    deltas = compute_delta(read_container(base_path), read_container(need(cfg, "finetuned")), filter);
  }

  const auto result = compress(deltas, opt, digest);
  write_container(need(cfg, "output"), result.artifact);
  auto report = result.report();
  report["command"] = "compress";
  report["config"] = cfg;
  emit(report, maybe(cfg, "report"));
  return 0;
}

int cmd_reconstruct(const json& cfg) {
  const auto base_path = need(cfg, "base");
  const auto artifact = read_container(need(cfg, "artifact"));
  const auto out = reconstruct_checkpoint(artifact, read_container(base_path), file_digest(base_path),
                                          cfg.at("force").get<bool>(), threads_of(cfg));
  write_container(need(cfg, "output"), out);
  return 0;
}

int cmd_merge(const json& cfg) {
  const auto base_path = need(cfg, "base");
  const auto base = read_container(base_path);
  const auto digest = file_digest(base_path);
  const bool force = cfg.at("force").get<bool>();
  const int threads = threads_of(cfg);

  MergeConfig mc;
  const auto strategy = cfg.at("strategy").get<std::string>();
  if (strategy == "ta") {
    mc.strategy = MergeStrategy::kTaskArithmetic;
  } else if (strategy == "ties") {
    mc.strategy = MergeStrategy::kTies;
  } else {
    throw ConfigError("--strategy must be 'ta' or 'ties', got '" + strategy + "'");
  }
  mc.lambda = cfg.at("lambda").get<double>();
  mc.retain = cfg.at("retain").get<double>();
  const auto pre = cfg.at("pre").get<std::string>();
  const double ratio = cfg.at("ratio").get<double>();
  if (pre == "none") {
    mc.pre = PreSparsify::none();
  } else if (pre == "dare") {
    mc.pre = PreSparsify::dare(ratio);
  } else if (pre == "impart") {
    mc.pre = PreSparsify::impart(ratio, cfg.at("beta").get<double>(), cfg.at("c").get<double>());
  } else {
    throw ConfigError("--pre must be none, dare or impart, got '" + pre + "'");
  }
  mc.validate();

  const auto models = cfg.at("models").get<std::vector<std::string>>();
  if (models.empty()) throw ConfigError("--models needs at least one input");
  std::vector<TensorMap> deltas;
  for (const auto& path : models) {
    const auto c = read_container(path);
    const std::string kind = c.metadata.is_object() ? c.metadata.value("kind", "") : "";
    if (kind == "artifact") {
      const auto recorded = c.metadata.value("base_digest", "");
      if (!force && recorded != digest) {
        throw DataError("'" + path + "' was compressed against a different base; pass --force to merge anyway");
      }
      TensorMap m;
      for (auto& [name, d] : decode_artifact(c, threads)) m[name] = std::move(d.data);
      deltas.push_back(std::move(m));
    } else if (kind == "delta") {
      deltas.push_back(delta_map(split_delta_container(c)));
    } else {
      deltas.push_back(delta_map(compute_delta(base, c)));
    }
  }

  const auto merged = merge_with_presparsify(to_tensor_map(base), deltas, mc);
  TensorContainer out;
  for (const auto& [name, entry] : base.tensors) {
    auto it = merged.find(name);
    if (it == merged.end()) {
      out.tensors[name] = entry;
      continue;
    }
    const Matrix& w = it->second;
    out.tensors[name] = TensorEntry::from_floats(
        std::span<const float>(w.data(), static_cast<std::size_t>(w.size())), entry.shape, entry.dtype);
  }
  write_container(need(cfg, "output"), out);
  emit({{"schema_version", 1}, {"command", "merge"}, {"merge", mc.to_json()}, {"config", cfg}},
       maybe(cfg, "report"));
  return 0;
}

int cmd_bench(const json& cfg) {
  BenchSpec spec;
  if (auto path = maybe(cfg, "spec")) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open bench spec '" + *path + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("bench spec '" + *path + "': " + e.what());
    }
    spec = BenchSpec::from_json(j);
  }
  const auto report = run_bench(spec, threads_of(cfg));
  auto j = report.to_json();
  j["config"] = cfg;
  emit(j, maybe(cfg, "output"));
  if (auto csv = maybe(cfg, "csv")) {
    std::ofstream out(*csv);
    if (!out) throw ConfigError("cannot write CSV '" + *csv + "'");
    out << report.to_csv();
  }
  return 0;
}

int cmd_stats(const json& cfg) {
  const auto path = need(cfg, "input");
  const auto bytes = read_file_bytes(path);
  const auto c = parse_container(bytes);
  json tensors = json::array();
  for (const auto& [name, entry] : c.tensors) {
    json t = {{"name", name},
              {"dtype", std::string(dtype_name(entry.dtype))},
              {"shape", entry.shape},
              {"bytes", entry.bytes.size()}};
    if (cfg.at("spectrum").get<bool>() && entry.is_matrix() && entry.dtype != DType::kU8Packed) {
      try {
        const auto f = svd(entry.to_matrix(), name);
        double total = 0.0;
        for (float s : f.sigma) total += static_cast<double>(s) * s;
        double acc = 0.0;
        Eigen::Index k90 = 0;
        for (float s : f.sigma) {
          acc += static_cast<double>(s) * s;
          ++k90;
          if (acc >= 0.9 * total) break;
        }
        const std::size_t top = std::min<std::size_t>(8, f.sigma.size());
        t["spectrum"] = {{"top_sigma", std::vector<float>(f.sigma.begin(), f.sigma.begin() + top)},
                         {"rank_for_90pct_energy", total > 0.0 ? k90 : 0}};
      } catch (const Error& e) {
        rethrow_with_tensor(e, name);
      }
    }
    tensors.push_back(std::move(t));
  }
  json out = {{"schema_version", 1},
              {"file_bytes", bytes.size()},
              {"digest", sha256_hex(bytes)},
              {"kind", c.metadata.is_object() ? c.metadata.value("kind", "checkpoint") : "checkpoint"},
              {"tensors", tensors}};
  if (is_artifact(c)) {
    json records = json::object();
    for (const auto& [name, rec] : c.metadata.at("records").items()) {
      json summary = {{"method", rec.value("method", "")}};
      for (const char* key : {"alpha", "kept", "rank", "p"}) {
        if (rec.contains(key)) summary[key] = rec[key];
      }
      records[name] = summary;
    }
    out["base_digest"] = c.metadata.value("base_digest", "");
    out["records"] = records;
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace deltapress::cli
