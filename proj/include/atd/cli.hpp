// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "atd/config.hpp"
#include "atd/data.hpp"
#include "atd/gradcheck_suite.hpp"
#include "atd/training.hpp"

namespace atd::cli {

/// Process exit codes; stable for scripting.
enum ExitCode : int {
  kOk = 0,
  kInternalError = 1,
  kConfigError = 2,
  kIoError = 3,
  kDiverged = 4,
  kShapeMismatch = 5,
  kGradcheckFailed = 6,
};

namespace fs = std::filesystem;

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kSeriesName = "series.csv";
inline constexpr const char* kIndexName = "params.index";

/// "YYYY-MM-DD HH:00:00" for hour offset `hours` after 2016-07-01 00:00.
inline std::string hourly_timestamp(std::size_t hours) {
  using namespace std::chrono;
  const sys_days base = year{2016} / July / day{1};
  const sys_days day_point = base + days{static_cast<long>(hours / 24)};
  const year_month_day ymd{day_point};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02zu:00:00", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hours % 24);
  return buf;
}

// ---------------------------------------------------------------------------
// Dataset on disk: series.csv + images/*.atdt + manifest.txt
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::size_t row_start = 0;
  std::string image;
  double target = 0.0;
  std::size_t label = 0;
};

struct Manifest {
  std::size_t window = 0;
  std::size_t classes = 0;
  std::string series = kSeriesName;
  std::vector<ManifestEntry> samples;
};

inline void write_dataset(const fs::path& dir, const std::vector<BimodalSample>& samples, const SyntheticSpec& spec) {
  fs::create_directories(dir / "images");
  SeriesDataset ds;
  std::ostringstream manifest;
  manifest << "# atd synthetic bimodal dataset\n"
           << "version=1\n"
           << "window=" << spec.steps << '\n'
           << "classes=" << spec.classes << '\n'
           << "series=" << kSeriesName << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::size_t start = ds.rows.size();
    for (std::size_t t = 0; t < spec.steps; ++t) {
      SeriesRow row;
      row.timestamp = hourly_timestamp(start + t);
      row.target = s.series.at(t, 0);
      for (std::size_t k = 0; k < kSeriesFeatures; ++k) row.features[k] = s.series.at(t, k + 1);
      ds.rows.push_back(std::move(row));
    }
    char name[64];
    std::snprintf(name, sizeof name, "images/sample_%05zu.atdt", i);
    write_tensor_file((dir / name).string(), s.image);
    manifest << "sample " << i << ' ' << start << ' ' << name << ' ' << format_double(s.target) << ' ' << s.label
             << '\n';
  }
  write_series_csv((dir / kSeriesName).string(), ds);
  std::ofstream out(dir / kManifestName, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << manifest.str();
  if (!out) throw IoError("write failed for manifest in '" + dir.string() + "'");
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset manifest '" + path.string() + "'");
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (line.rfind("sample ", 0) == 0) {
      std::string tag, target;
      std::size_t index = 0;
      ManifestEntry e;
      if (!(ls >> tag >> index >> e.row_start >> e.image >> target >> e.label) || !parse_double(target, e.target) ||
          index != m.samples.size()) {
        throw ParseError("manifest: malformed sample on line " + std::to_string(line_no), line_no);
      }
      m.samples.push_back(std::move(e));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("manifest: malformed line " + std::to_string(line_no), line_no);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "window") m.window = std::stoul(value);
      else if (key == "classes") m.classes = std::stoul(value);
      else if (key == "series") m.series = value;
    } catch (const std::exception&) {
      throw ParseError("manifest: bad value on line " + std::to_string(line_no), line_no);
    }
  }
  if (m.window == 0 || m.samples.empty()) throw ParseError("manifest: missing window or samples", line_no);
  return m;
}

inline std::vector<BimodalSample> load_dataset(const fs::path& dir) {
  const Manifest m = read_manifest(dir / kManifestName);
  const SeriesDataset ds = load_series_csv((dir / m.series).string());
  std::vector<BimodalSample> out;
  out.reserve(m.samples.size());
  for (const auto& e : m.samples) {
    if (e.row_start + m.window > ds.size()) {
      throw ParseError("manifest: sample window past end of series", e.row_start);
    }
    BimodalSample s;
    std::vector<double> window;
    for (std::size_t t = 0; t < m.window; ++t) {
      const auto& row = ds.rows[e.row_start + t];
      window.push_back(row.target);
      window.insert(window.end(), row.features.begin(), row.features.end());
    }
    s.series = Tensor({m.window, kSeriesColumns}, std::move(window));
    s.image = read_tensor_file((dir / e.image).string());
    s.target = e.target;
    s.label = e.label;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter persistence: one ATDT file per tensor plus a name -> file index.
// ---------------------------------------------------------------------------

inline void write_parameters(const fs::path& out_dir, AtdModel& model) {
  fs::create_directories(out_dir / "params");
  std::ostringstream index;
  for (auto& p : model.parameters()) {
    const std::string rel = "params/" + p.name + ".atdt";
    write_tensor_file((out_dir / rel).string(), *p.tensor);
    index << p.name << ' ' << rel << '\n';
  }
  std::ofstream out(out_dir / kIndexName, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write parameter index in '" + out_dir.string() + "'");
  out << index.str();
}

class ParamShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loads every parameter of `model` from an index file. Any missing, unknown,
/// corrupt or mis-shaped entry raises ParamShapeError.
inline void read_parameters(const fs::path& index_path, AtdModel& model) {
  std::ifstream in(index_path);
  if (!in) throw IoError("cannot open parameter index '" + index_path.string() + "'");
  std::map<std::string, std::string> files;
  std::string name, rel;
  while (in >> name >> rel) files[name] = rel;
  const fs::path base = index_path.parent_path();
  auto params = model.parameters();
  for (auto& p : params) {
    auto it = files.find(p.name);
    if (it == files.end()) {
      throw ParamShapeError("parameter '" + p.name + "' missing from index; config expects shape " +
                            shape_str(p.tensor->shape()));
    }
    Tensor loaded;
    try {
      loaded = read_tensor_file((base / it->second).string());
    } catch (const FormatError& e) {
      throw ParamShapeError("parameter '" + p.name + "': " + e.what());
    }
    if (loaded.shape() != p.tensor->shape()) {
      throw ParamShapeError("parameter '" + p.name + "': file shape " + shape_str(loaded.shape()) +
                            " vs config shape " + shape_str(p.tensor->shape()));
    }
    *p.tensor = std::move(loaded);
    files.erase(it);
  }
  if (!files.empty()) {
    throw ParamShapeError("parameter '" + files.begin()->first + "' in index is not part of the configured model");
  }
}

/// Rounds every parameter through binary32, the precision they are stored at.
inline void quantize_parameters(AtdModel& model) {
  for (auto& p : model.parameters())
    for (auto& v : p.tensor->data()) v = static_cast<double>(static_cast<float>(v));
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace detail {

template <class Body>
int guarded(std::ostream& err, Body body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const ParamShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kShapeMismatch;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const ParseError& e) {
    err << "error: dataset: " << e.what() << '\n';
    return kIoError;
  } catch (const FormatError& e) {
    err << "error: dataset: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericDomainError& e) {
    err << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    // Shape, geometry and contract violations here come from config values
    // (e.g. a kernel larger than the padded image).
    err << "error: invalid configuration: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
}

inline std::vector<BimodalSample> select_split(const RunConfig& cfg, const std::vector<BimodalSample>& data,
                                               const std::string& which) {
  if (which == "all") return data;
  auto [train, test] = split(data, cfg.train_fraction, cfg.train.seed);
  return which == "train" ? train : test;
}

inline ModelConfig model_for(const RunConfig& cfg, const std::vector<BimodalSample>& data) {
  ModelConfig mc = cfg.model;
  mc.image_channels = data.front().image.dim(0);
  return mc;
}

}  // namespace detail

inline int cmd_synth(const std::string& config_path, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const RunConfig cfg = load_run_config(config_path);
    const auto samples = gen_synthetic_bimodal(cfg.synth);
    write_dataset(cfg.out_dir, samples, cfg.synth);
    out << "wrote " << samples.size() << " samples to " << cfg.out_dir << '\n';
    return int{kOk};
  });
}

inline int cmd_train(const std::string& config_path, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const RunConfig cfg = load_run_config(config_path);
    const auto data = load_dataset(cfg.data_dir);
    auto [train_set, test_set] = split(data, cfg.train_fraction, cfg.train.seed);
    AtdModel model(detail::model_for(cfg, data), cfg.model_seed);
    MetricsReport trace = train(model, train_set, cfg.train);
    quantize_parameters(model);

    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_parameters(dir, model);

    MetricsReport train_report = evaluate(model, train_set, cfg.task);
    train_report.loss_trace = trace.loss_trace;
    const MetricsReport test_report = evaluate(model, test_set, cfg.task);
    write_text(dir / "train_report.txt", train_report.serialize());
    write_text(dir / "test_report.txt", test_report.serialize());
    std::ostringstream losses;
    for (double l : trace.loss_trace) losses << format_double(l) << '\n';
    write_text(dir / "loss_trace.txt", losses.str());

    out << "train: " << train_set.size() << " samples, " << cfg.train.epochs << " epochs, variant "
        << variant_name(cfg.model.variant) << '\n'
        << "[train split]\n" << train_report.serialize() << "[test split]\n" << test_report.serialize();
    return int{kOk};
  });
}

inline int cmd_eval(const std::string& config_path, const std::string& index_path, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const RunConfig cfg = load_run_config(config_path);
    const auto data = load_dataset(cfg.data_dir);
    AtdModel model(detail::model_for(cfg, data), cfg.model_seed);
    read_parameters(index_path, model);
    const auto subset = detail::select_split(cfg, data, cfg.eval_split);
    const MetricsReport report = evaluate(model, subset, cfg.task);
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "eval_report.txt", report.serialize());
    out << "[" << cfg.eval_split << " split]\n" << report.serialize();
    return int{kOk};
  });
}

inline int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, const std::string& fault, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  debug::backward_fault() = fault;
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (std::size_t k = 0; k < seeds; ++k) {
    for (const auto& r : run_gradcheck_suite(seed + k)) {
      if (!worst.count(r.component)) order.push_back(r.component);
      worst[r.component] = std::max(worst[r.component], r.max_rel_error);
    }
  }
  debug::backward_fault().clear();
  std::vector<std::string> failed;
  for (const auto& name : order) {
    const bool ok = worst[name] < 1e-4;
    out << std::left << std::setw(28) << name << ' ' << std::scientific << std::setprecision(3) << worst[name] << ' '
        << (ok ? "PASS" : "FAIL") << '\n';
    if (!ok) failed.push_back(name);
  }
  out << std::defaultfloat;
  if (failed.empty()) return kOk;
  err << "gradcheck failed:";
  for (const auto& f : failed) err << ' ' << f;
  err << '\n';
  return kGradcheckFailed;
}

}  // namespace atd::cli
