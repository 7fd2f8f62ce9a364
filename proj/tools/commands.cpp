#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "bayesbeat/kernels.hpp"
#include "bayesbeat/kvconfig.hpp"

namespace bayesbeat::cli {

namespace fs = std::filesystem;

namespace {

template <class F>
void as_usage(const std::string& section, F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(section + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw UsageError(section + ": " + e.what());
  }
}

nlohmann::ordered_json kv_json(const std::string& text) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : parse_kv_text(text)) j[k] = v;
  return j;
}


}  // namespace

void RunConfig::apply(std::map<std::string, std::string> kv) {
  as_usage("config", [&] {
    for (const char* section : {"synth", "train"}) {
      auto probe = kv;
      if (take_prefixed(probe, section).count("seed"))
        throw std::invalid_argument(std::string(section) + ".seed is not allowed; use the top-level seed key");
    }
    synth.apply(take_prefixed(kv, "synth"));
    for (const auto& [k, v] : take_prefixed(kv, "split")) {
      if (k == "train") split[0] = parse_double(v, "split.train");
      else if (k == "val") split[1] = parse_double(v, "split.val");
      else if (k == "test") split[2] = parse_double(v, "split.test");
      else throw std::invalid_argument("unknown key 'split." + k + "'");
    }
    net.apply(take_prefixed(kv, "net"));
    train.apply(take_prefixed(kv, "train"));
    for (const auto& [k, v] : take_prefixed(kv, "infer")) {
      if (k == "draws") infer_draws = parse_size(v, "infer.draws");
      else if (k == "mode") infer_mode = parse_sampling_mode(trim(v));
      else if (k == "threshold") policy = parse_threshold(v);
      else throw std::invalid_argument("unknown key 'infer." + k + "'");
    }
    for (const auto& [k, v] : kv) {
      if (k == "seed") seed = parse_u64(v, "seed");
      else if (k == "threads") threads = static_cast<int>(parse_size(v, "threads"));
      else throw std::invalid_argument("unknown key '" + k + "'");
    }
  });
}

void RunConfig::finalize() {
  synth.seed = seed;
  train.seed = seed;
  as_usage("synth", [&] { synth.validate(); });
  as_usage("split", [&] {
    double total = 0.0;
    for (double f : split) {
      if (!(f >= 0.0)) throw std::invalid_argument("fractions must be non-negative");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("fractions must sum to 1");
  });
  as_usage("net", [&] { net.validate(); });
  as_usage("train", [&] { train.validate(); });
  as_usage("infer", [&] {
    if (infer_draws == 0) throw std::invalid_argument("draws must be >= 1");
    policy.validate();
  });
  if (threads < 0) throw UsageError("threads must be >= 0");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "seed=" << seed << "\nthreads=" << threads << '\n';
  auto section = [&os](const std::string& prefix, const std::string& text) {
    for (const auto& line : bayesbeat::split(text, '\n'))
      if (!line.empty() && !line.starts_with("seed=")) os << prefix << '.' << line << '\n';
  };
  section("synth", synth.to_text());
  os << "split.train=" << format_double(split[0]) << "\nsplit.val=" << format_double(split[1])
     << "\nsplit.test=" << format_double(split[2]) << '\n';
  section("net", net.to_text());
  section("train", train.to_text());
  os << "infer.draws=" << infer_draws << "\ninfer.mode=" << to_string(infer_mode)
     << "\ninfer.threshold=" << (policy.threshold ? format_double(*policy.threshold) : "none") << '\n';
  return os.str();
}

RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg;
  if (o.config) {
    std::map<std::string, std::string> kv;
    try {
      kv = load_kv_file(*o.config);
    } catch (const std::invalid_argument& e) {
      throw UsageError(*o.config + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw UsageError(e.what());
    }
    cfg.apply(std::move(kv));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.mc_draws) cfg.infer_draws = *o.mc_draws;
  as_usage("flags", [&] {
    if (o.threshold) cfg.policy = parse_threshold(*o.threshold);
    if (o.mode) {
      const auto mode = parse_sampling_mode(*o.mode);
      if (mode == SamplingMode::mean_only) throw std::invalid_argument("--mode must be weight-sample or local-reparam");
      cfg.train.mode = mode;
      cfg.infer_mode = mode;
    }
  });
  cfg.finalize();
  if (cfg.threads > 0) kernels::set_num_threads(cfg.threads);
  return cfg;
}

std::vector<std::optional<double>> parse_threshold_list(const std::string& text) {
  std::vector<std::optional<double>> out;
  as_usage("thresholds", [&] {
    for (const auto& item : split(text, ',')) out.push_back(parse_threshold(item).threshold);
    if (out.empty()) throw std::invalid_argument("no thresholds given");
  });
  return out;
}

std::string segment_id(const Segment& s, std::size_t index) { return s.subject_id + ":" + std::to_string(index); }

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw DataError("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

int run_guarded(std::ostream& log, const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    log << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    log << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    log << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    log << "data error: " << e.what() << '\n';
    return kData;
  }
}

int cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const auto segments = synth_generate(cfg.synth);
  const auto manifest = split_subjects(segments, cfg.split, cfg.seed);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::pair<fs::path, std::string>> files;
  for (auto p : {Partition::train, Partition::val, Partition::test}) {
    const auto part = select_partition(segments, manifest, p);
    const auto af = std::count_if(part.begin(), part.end(), [](const Segment& s) { return s.label == 1; });
    log << to_string(p) << ": " << part.size() << " segments, " << manifest.subjects(p).size() << " subjects, AF ratio "
        << (part.empty() ? 0.0 : static_cast<double>(af) / static_cast<double>(part.size())) << '\n';
    files.emplace_back(out_dir / (to_string(p) + ".bbseg"), encode_segments(part));
  }
  files.emplace_back(out_dir / "manifest.json", manifest.to_json());
  files.emplace_back(out_dir / "synth.cfg", cfg.synth.to_text());

  // Stage every file before publishing any of them.
  std::vector<fs::path> staged;
  try {
    for (const auto& [path, content] : files) {
      const fs::path tmp = path.string() + ".tmp";
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      staged.push_back(tmp);
      if (!out) throw DataError("cannot write " + tmp.string());
      out.write(content.data(), static_cast<std::streamsize>(content.size()));
      if (!out) throw DataError("write failed for " + tmp.string());
    }
  } catch (...) {
    for (const auto& t : staged) fs::remove(t, ec);
    throw;
  }
  for (const auto& [path, content] : files) fs::rename(path.string() + ".tmp", path);
  log << "wrote " << segments.size() << " segments to " << out_dir.string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& train_path, const fs::path& val_path, const fs::path& out_checkpoint,
              const std::optional<fs::path>& run_log, std::ostream& log) {
  const auto train_set = load_segments(train_path);
  const auto val_set = load_segments(val_path);
  require_disjoint_subjects(train_set, val_set, "train/validation files");
  log << "effective config:\n" << cfg.to_text();

  std::string log_lines = nlohmann::ordered_json{{"config", kv_json(cfg.to_text())}}.dump() + "\n";
  Network net = Network::build(cfg.net, cfg.seed);
  log << "network: " << net.parameter_count() << " parameters; " << train_set.size() << " train / " << val_set.size()
      << " validation segments\n";
  const auto result = train(net, train_set, val_set, cfg.train, [&](const EpochReport& r) {
    char line[256];
    std::snprintf(line, sizeof line, "epoch %zu: likelihood %.5f prior %.5f val F1 %.4f%s (%.1f s)\n", r.epoch,
                  r.likelihood, r.prior, r.validation.f1, r.best ? " *" : "", r.seconds);
    log << line << std::flush;
    log_lines += r.to_json() + "\n";
  });

  CheckpointMeta meta;
  meta.values["best_epoch"] = std::to_string(result.best_epoch);
  meta.values["best_val_f1"] = format_double(result.best_val_f1);
  meta.values["epochs"] = std::to_string(cfg.train.epochs);
  meta.values["mode"] = to_string(cfg.train.mode);
  save_checkpoint(result.best, out_checkpoint, meta);
  if (run_log) write_file_atomic(*run_log, log_lines);
  log << "best epoch " << result.best_epoch << " (validation F1 " << result.best_val_f1 << "), saved "
      << out_checkpoint.string() << '\n';
  return kOk;
}

namespace {

InferenceOptions inference_options(const RunConfig& cfg, const ThresholdPolicy& policy) {
  InferenceOptions o;
  o.draws = cfg.infer_draws;
  o.seed = cfg.seed;
  o.mode = cfg.infer_mode;
  o.policy = policy;
  return o;
}

}  // namespace

int cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data,
             const std::vector<std::optional<double>>& thresholds, const fs::path& out_json, const fs::path& out_csv,
             std::ostream& log) {
  Network net = load_checkpoint(checkpoint);
  const auto segments = load_segments(data);
  if (segments.empty()) throw DataError(data.string() + " contains no segments");
  std::vector<std::size_t> all(segments.size());
  std::iota(all.begin(), all.end(), 0);
  const auto labels = batch_labels(segments, all);

  const auto preds = predict_batch(net, segments, inference_options(cfg, {}));
  std::vector<MetricsReport> reports;
  as_usage("thresholds", [&] { reports = threshold_sweep(preds, labels, thresholds); });

  std::string json;
  for (const auto& r : reports) json += r.to_json() + "\n";
  const std::string csv = sweep_csv(reports);
  write_file_atomic(out_json, json);
  write_file_atomic(out_csv, csv);
  log << csv;

  // Uncertainty by noise band, when the data carries synthetic provenance.
  double sum[3] = {0, 0, 0};
  std::size_t count[3] = {0, 0, 0};
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (!segments[i].noise_level) continue;
    const double nl = *segments[i].noise_level;
    const int band = nl <= 0.1 ? 0 : (nl >= 0.7 ? 2 : 1);
    sum[band] += preds[i].u_scalar;
    ++count[band];
  }
  const char* names[3] = {"clean (<=0.1)", "moderate", "heavy (>=0.7)"};
  for (int b = 0; b < 3; ++b)
    if (count[b]) log << "mean u_scalar " << names[b] << ": " << sum[b] / static_cast<double>(count[b]) << " over "
                      << count[b] << " segments\n";
  return kOk;
}

int cmd_predict(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
                std::ostream& log) {
  Network net = load_checkpoint(checkpoint);
  const auto segments = load_segments(data);
  const auto preds = predict_batch(net, segments, inference_options(cfg, cfg.policy));
  std::string lines;
  std::size_t abstained = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    lines += prediction_json(segment_id(segments[i], i), preds[i]) + "\n";
    abstained += preds[i].accepted ? 0 : 1;
  }
  write_file_atomic(out, lines);
  log << preds.size() << " predictions, " << abstained << " abstained, written to " << out.string() << '\n';
  return kOk;
}

int cmd_export_features(const RunConfig& /*cfg*/, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
                        std::ostream& log) {
  Network net = load_checkpoint(checkpoint);
  const auto segments = load_segments(data);
  std::string csv;
  std::size_t width = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < segments.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, segments.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor f = net.penultimate_features(make_batch(segments, idx));
    width = f.dim(1);
    if (start == 0) {
      csv = "segment_id,label";
      for (std::size_t j = 0; j < width; ++j) csv += ",f" + std::to_string(j);
      csv += '\n';
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto& s = segments[idx[r]];
      csv += segment_id(s, idx[r]) + "," + std::to_string(s.label.value_or(-1));
      for (std::size_t j = 0; j < width; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(f[r * width + j]));
        csv += buf;
      }
      csv += '\n';
    }
  }
  write_file_atomic(out, csv);
  log << segments.size() << " feature rows of width " << width << " written to " << out.string() << '\n';
  return kOk;
}

}  // namespace bayesbeat::cli
