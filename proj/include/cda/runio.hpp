#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cda/domain.hpp"
#include "cda/evalkit.hpp"
#include "cda/model.hpp"
#include "cda/trainer.hpp"

namespace cda {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Formatting. All floats are serialized with enough digits to round-trip
// exactly, so re-running a command reproduces files byte for byte.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError("bad json in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifest JSON
// ---------------------------------------------------------------------------

inline json to_json(const SplitManifest& m) {
  json j;
  json grid = json::array();
  for (const AttributeValue& a : m.attribute_grid) grid.push_back(a.value);
  j["attribute_grid"] = grid;
  j["source_indices"] = {m.source_indices[0], m.source_indices[1]};
  j["probe_indices"] = m.probe_indices;
  j["unseen_indices"] = m.unseen_indices;
  j["position_kind"] = to_string(m.position_kind);
  if (m.segment_kind) j["segment_kind"] = to_string(*m.segment_kind);
  j["seed"] = m.seed;
  return j;
}

inline SplitManifest manifest_from_json(const json& j) {
  SplitManifest m;
  for (double v : j.at("attribute_grid")) m.attribute_grid.push_back(AttributeValue{v});
  m.source_indices = {j.at("source_indices").at(0).get<int>(), j.at("source_indices").at(1).get<int>()};
  m.probe_indices = j.at("probe_indices").get<std::vector<int>>();
  m.unseen_indices = j.at("unseen_indices").get<std::vector<int>>();
  m.position_kind = position_from_string(j.at("position_kind").get<std::string>());
  if (j.contains("segment_kind")) m.segment_kind = segment_from_string(j.at("segment_kind").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  validate(m);
  return m;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json plus one CSV per domain with the column
// contract  attribute, y (may be empty), x_0 ... x_{d-1}.
// ---------------------------------------------------------------------------

inline std::string domain_file_name(int index) { return "domain_" + std::to_string(index) + ".csv"; }

inline std::string domain_to_csv(const DomainDataset& d) {
  std::ostringstream out;
  out << "attribute,y";
  for (int k = 0; k < d.x.cols; ++k) out << ",x_" << k;
  out << "\n";
  for (int i = 0; i < d.x.rows; ++i) {
    out << format_double(d.attribute.value) << ',';
    if (d.labeled()) out << d.y[static_cast<std::size_t>(i)];
    auto row = d.x.row(i);
    for (double v : row) out << ',' << format_double(v);
    out << "\n";
  }
  return out.str();
}

inline DomainDataset domain_from_csv(const std::string& text, Role role) {
  DomainDataset d;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw IoError("domain csv: missing header");
  int dim = -1;  // count x_ columns from the header
  {
    int commas = 0;
    for (char c : line)
      if (c == ',') ++commas;
    dim = commas - 1;
  }
  require(dim >= 1, "domain csv: no feature columns");
  std::vector<double> xs;
  std::vector<int> ys;
  bool labeled = true;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    d.attribute.value = std::stod(cell);
    std::getline(ls, cell, ',');
    if (cell.empty())
      labeled = false;
    else
      ys.push_back(std::stoi(cell));
    for (int k = 0; k < dim; ++k) {
      if (!std::getline(ls, cell, ',')) throw IoError("domain csv: short row");
      xs.push_back(std::stod(cell));
    }
    ++rows;
  }
  d.x = Matrix(rows, dim);
  d.x.data = std::move(xs);
  if (labeled) d.y = std::move(ys);
  d.role = role;
  return d;
}

struct DatasetDir {
  SplitManifest manifest;
  std::vector<DomainDataset> domains;  // aligned with the attribute grid
  json benchmark;                      // generator parameters as written by gen
};

inline void write_dataset_dir(const fs::path& dir, const SplitManifest& manifest,
                              const std::vector<DomainDataset>& domains, const json& benchmark) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  json j = to_json(manifest);
  j["benchmark"] = benchmark;
  json files = json::array();
  for (int i = 0; i < static_cast<int>(domains.size()); ++i) files.push_back(domain_file_name(i));
  j["files"] = files;
  write_text_file(dir / "manifest.json", j.dump(2) + "\n");
  for (int i = 0; i < static_cast<int>(domains.size()); ++i)
    write_text_file(dir / domain_file_name(i), domain_to_csv(domains[static_cast<std::size_t>(i)]));
}

inline DatasetDir load_dataset_dir(const fs::path& dir) {
  json j = read_json_file(dir / "manifest.json");
  DatasetDir ds;
  ds.manifest = manifest_from_json(j);
  if (j.contains("benchmark")) ds.benchmark = j["benchmark"];
  for (int i = 0; i < ds.manifest.grid_size(); ++i) {
    Role role = role_of(ds.manifest, i);
    DomainDataset d = domain_from_csv(read_text_file(dir / domain_file_name(i)), role);
    d.attribute = ds.manifest.attribute_grid[static_cast<std::size_t>(i)];
    ds.domains.push_back(std::move(d));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Train config JSON (lossless round-trip)
// ---------------------------------------------------------------------------

inline json to_json(const TrainConfig& c) {
  json j;
  j["variant"] = to_string(c.variant);
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["inner_aux_steps"] = c.inner_aux_steps;
  j["queue_capacity"] = c.queue_capacity;
  j["continuity"] = {{"target_norm", c.continuity.target_norm}, {"weight", c.continuity.weight}};
  j["alternation_ratio"] = {c.pull_steps, c.shrink_steps};
  j["seed"] = c.seed;
  j["max_probe_domains_per_step"] = c.max_probe_domains_per_step;
  j["model"] = {{"encoder_hidden", c.model.encoder_hidden},
                {"feature_dim", c.model.feature_dim},
                {"classifier_hidden", c.model.classifier_hidden},
                {"conv_width", c.model.conv_width}};
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.steps = j.at("steps").get<long>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.inner_aux_steps = j.at("inner_aux_steps").get<int>();
  c.queue_capacity = j.at("queue_capacity").get<int>();
  c.continuity.target_norm = j.at("continuity").at("target_norm").get<double>();
  c.continuity.weight = j.at("continuity").at("weight").get<double>();
  c.pull_steps = j.at("alternation_ratio").at(0).get<int>();
  c.shrink_steps = j.at("alternation_ratio").at(1).get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.max_probe_domains_per_step = j.at("max_probe_domains_per_step").get<int>();
  c.model.encoder_hidden = j.at("model").at("encoder_hidden").get<std::vector<int>>();
  c.model.feature_dim = j.at("model").at("feature_dim").get<int>();
  c.model.classifier_hidden = j.at("model").at("classifier_hidden").get<int>();
  c.model.conv_width = j.at("model").at("conv_width").get<int>();
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: parameter arrays keyed by component path plus a metadata
// record.
// ---------------------------------------------------------------------------

namespace detail {

inline json mlp_to_json(const Mlp& m) {
  json j = json::array();
  for (const Linear& l : m.layers) {
    json w = json::array();
    for (int r = 0; r < l.w.rows; ++r) {
      json row = json::array();
      for (int c = 0; c < l.w.cols; ++c) row.push_back(l.w(r, c));
      w.push_back(row);
    }
    j.push_back({{"weight", w}, {"bias", l.b}});
  }
  return j;
}

inline Mlp mlp_from_json(const json& j) {
  Mlp m;
  for (const json& lj : j) {
    Linear l;
    const json& w = lj.at("weight");
    l.w = Matrix(static_cast<int>(w.size()), static_cast<int>(w.at(0).size()));
    for (int r = 0; r < l.w.rows; ++r)
      for (int c = 0; c < l.w.cols; ++c) l.w(r, c) = w.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
    l.b = lj.at("bias").get<std::vector<double>>();
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline json conv_to_json(const ConvNet& n) {
  json j;
  j["input_res"] = n.input_res;
  json layers = json::array();
  for (const ConvLayer& l : n.layers) {
    json w = json::array();
    for (int r = 0; r < l.w.rows; ++r) {
      json row = json::array();
      for (int c = 0; c < l.w.cols; ++c) row.push_back(l.w(r, c));
      w.push_back(row);
    }
    layers.push_back({{"in_ch", l.in_ch}, {"out_ch", l.out_ch}, {"ksize", l.ksize},
                      {"stride", l.stride}, {"pad", l.pad}, {"weight", w}, {"bias", l.b}});
  }
  j["layers"] = layers;
  return j;
}

inline ConvNet conv_from_json(const json& j) {
  ConvNet n;
  n.input_res = j.at("input_res").get<int>();
  for (const json& lj : j.at("layers")) {
    ConvLayer l;
    l.in_ch = lj.at("in_ch").get<int>();
    l.out_ch = lj.at("out_ch").get<int>();
    l.ksize = lj.at("ksize").get<int>();
    l.stride = lj.at("stride").get<int>();
    l.pad = lj.at("pad").get<int>();
    const json& w = lj.at("weight");
    l.w = Matrix(static_cast<int>(w.size()), static_cast<int>(w.at(0).size()));
    for (int r = 0; r < l.w.rows; ++r)
      for (int c = 0; c < l.w.cols; ++c) l.w(r, c) = w.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
    l.b = lj.at("bias").get<std::vector<double>>();
    n.layers.push_back(std::move(l));
  }
  return n;
}

}  // namespace detail

struct CheckpointMeta {
  std::uint64_t seed = 0;
  long step_count = 0;
  int input_dim = 0;
  int feature_dim = 0;
  int num_classes = 0;
};

inline void save_checkpoint(const fs::path& path, const Model& model, const CheckpointMeta& meta) {
  json j;
  j["meta"] = {{"seed", meta.seed},
               {"step_count", meta.step_count},
               {"input_dim", meta.input_dim},
               {"feature_dim", meta.feature_dim},
               {"num_classes", meta.num_classes}};
  if (model.encoder.is_conv()) {
    j["encoder"] = {{"kind", "conv"}, {"net", detail::conv_to_json(std::get<ConvNet>(model.encoder.net))}};
  } else {
    j["encoder"] = {{"kind", "mlp"}, {"net", detail::mlp_to_json(std::get<Mlp>(model.encoder.net))}};
  }
  j["adapter1"] = {{"content", detail::mlp_to_json(model.adapter1.content)},
                   {"aux", detail::mlp_to_json(model.adapter1.aux)}};
  j["adapter2"] = {{"content", detail::mlp_to_json(model.adapter2.content)},
                   {"aux", detail::mlp_to_json(model.adapter2.aux)}};
  write_text_file(path, j.dump() + "\n");
}

inline std::pair<Model, CheckpointMeta> load_checkpoint(const fs::path& path) {
  json j = read_json_file(path);
  Model m;
  CheckpointMeta meta;
  meta.seed = j.at("meta").at("seed").get<std::uint64_t>();
  meta.step_count = j.at("meta").at("step_count").get<long>();
  meta.input_dim = j.at("meta").at("input_dim").get<int>();
  meta.feature_dim = j.at("meta").at("feature_dim").get<int>();
  meta.num_classes = j.at("meta").at("num_classes").get<int>();
  if (j.at("encoder").at("kind") == "conv") {
    ConvNet net = detail::conv_from_json(j.at("encoder").at("net"));
    m.encoder.net = std::move(net);
  } else {
    Mlp net = detail::mlp_from_json(j.at("encoder").at("net"));
    m.encoder.net = std::move(net);
  }
  m.encoder.input_dim = meta.input_dim;
  m.encoder.feature_dim = meta.feature_dim;
  m.adapter1.content = detail::mlp_from_json(j.at("adapter1").at("content"));
  m.adapter1.aux = detail::mlp_from_json(j.at("adapter1").at("aux"));
  m.adapter1.index = 1;
  m.adapter2.content = detail::mlp_from_json(j.at("adapter2").at("content"));
  m.adapter2.aux = detail::mlp_from_json(j.at("adapter2").at("aux"));
  m.adapter2.index = 2;
  return {std::move(m), meta};
}

// ---------------------------------------------------------------------------
// losses.csv
// ---------------------------------------------------------------------------

inline std::string losses_to_csv(const TrainLog& log) {
  std::ostringstream out;
  out << "step,step_kind,l_p,l_gp,l_s,l_ce,clf_l2,queue_occupancy\n";
  for (const TrainLogRecord& r : log.records) {
    out << r.step << ',' << to_string(r.losses.step_kind) << ',' << format_double(r.losses.l_p) << ','
        << format_double(r.losses.l_gp) << ',' << format_double(r.losses.l_s) << ','
        << format_double(r.losses.l_ce) << ',' << format_double(r.clf_l2) << ',' << r.queue_occupancy
        << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// metrics.json
// ---------------------------------------------------------------------------

inline json to_json(const MetricsReport& rep) {
  json j;
  json domains = json::array();
  for (std::size_t i = 0; i < rep.attributes.size(); ++i) {
    domains.push_back({{"attribute", rep.attributes[i]},
                       {"role", to_string(rep.roles[i])},
                       {"accuracy", rep.per_domain_accuracy[i]}});
  }
  j["per_domain"] = domains;
  j["subgroup_means"] = {{"s1", rep.subgroup_means.s1},
                         {"s2", rep.subgroup_means.s2},
                         {"probe", rep.subgroup_means.probe},
                         {"unseen", rep.subgroup_means.unseen}};
  j["overall_target_mean"] = rep.overall_target_mean;
  j["degradation_correlation"] = rep.degradation_correlation;
  if (rep.mmd_matrix) {
    json m = json::array();
    for (int r = 0; r < rep.mmd_matrix->rows; ++r) {
      json row = json::array();
      for (int c = 0; c < rep.mmd_matrix->cols; ++c) row.push_back((*rep.mmd_matrix)(r, c));
      m.push_back(row);
    }
    j["mmd_matrix"] = m;
  }
  return j;
}

}  // namespace cda
