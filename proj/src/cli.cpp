#include "hsds/cli.hpp"

#include "hsds/bilevel.hpp"
#include "hsds/metrics.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace hsds::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Real = double;

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", KeyType::integer, 0, "master seed; subsystem seeds derive from it"},
      {"paths.search_manifest", KeyType::text, "", "manifest searched over (split 50/50 into train/val)"},
      {"paths.train_manifest", KeyType::text, "", "manifest for post-search training (default: search manifest)"},
      {"paths.natural_pool", KeyType::text, "", "list file of natural-light positives"},
      {"paths.extractor_weights", KeyType::text, "", "VGG-16 tensor archive for the feature extractor"},
      {"paths.out_dir", KeyType::text, "runs/default", "directory for artifacts"},
      {"paths.architecture", KeyType::text, "", "architecture JSON (default: <out_dir>/architecture.json)"},
      {"paths.loss_report", KeyType::text, "", "loss weight report (default: <out_dir>/loss_weights.json)"},
      {"paths.checkpoint", KeyType::text, "", "model checkpoint (default: <out_dir>/model.hsds)"},
      {"paths.fuse_manifest", KeyType::text, "", "pairs to fuse"},
      {"paths.fused_dir", KeyType::text, "", "directory of fused PNGs (default: <out_dir>/fused)"},
      {"paths.eval_manifest", KeyType::text, "", "pairs to evaluate (default: fuse manifest)"},
      {"extractor.backend", KeyType::text, "auto", "auto | fallback | vgg16"},
      {"model.width", KeyType::integer, 16, "feature channels"},
      {"model.stream_edges", KeyType::integer, 2, "searchable edges per stream block"},
      {"model.iterations", KeyType::integer, 3, "unrolled iterations per stream"},
      {"search.lr_alpha", KeyType::real, 2e-1, "architecture learning rate"},
      {"search.lr_beta", KeyType::real, 3e-2, "loss learning rate"},
      {"search.lr_omega", KeyType::real, 2e-4, "weight learning rate"},
      {"search.epochs", KeyType::integer, 10, "search epochs"},
      {"search.batch_size", KeyType::integer, 2, "search batch size"},
      {"search.crop", KeyType::integer, 256, "random crop side"},
      {"search.retain_p", KeyType::integer, 2, "candidates retained per edge"},
      {"search.theta", KeyType::optional_real, nullptr, "prune threshold (null: 0.5 / active count)"},
      {"search.alpha_noise", KeyType::real, 1e-3, "std of the initial alpha noise"},
      {"search.fd_step", KeyType::real, 1e-3, "difference step of the beta hypergradient"},
      {"train.epochs", KeyType::integer, 60, "training epochs"},
      {"train.batch_size", KeyType::integer, 10, "training batch size"},
      {"train.lr", KeyType::real, 1e-4, "training learning rate"},
      {"train.crop", KeyType::integer, 256, "random crop side"},
      {"train.resume", KeyType::text, "", "training checkpoint to resume from"},
      {"fuse.under", KeyType::text, "", "single under-exposed input"},
      {"fuse.over", KeyType::text, "", "single over-exposed input"},
      {"fuse.output", KeyType::text, "", "output PNG for the single pair"},
  };
  return keys;
}

namespace {

json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

void check_type(const ConfigKey& k, const json& v) {
  bool ok = false;
  switch (k.type) {
    case KeyType::integer: ok = v.is_number_integer(); break;
    case KeyType::real: ok = v.is_number(); break;
    case KeyType::optional_real: ok = v.is_null() || v.is_number(); break;
    case KeyType::text: ok = v.is_string(); break;
  }
  if (!ok) throw ConfigError("config key '" + k.name + "' has the wrong type: " + v.dump());
}

/// Flattens a nested document into dotted leaves.
void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out[prefix] = j;
  }
}

}  // namespace

json default_config() {
  json j = json::object();
  for (const auto& k : config_keys()) j[pointer(k.name)] = k.default_value;
  return j;
}

json parse_value(const ConfigKey& key, const std::string& text) {
  try {
    std::size_t used = 0;
    switch (key.type) {
      case KeyType::integer: {
        const long long v = std::stoll(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case KeyType::optional_real:
        if (text == "null" || text == "auto") return nullptr;
        [[fallthrough]];
      case KeyType::real: {
        const double v = std::stod(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case KeyType::text: return text;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid value '" + text + "' for --" + key.name);
}

json resolve_config(const json& file, const std::map<std::string, std::string>& flags) {
  json cfg = default_config();
  if (!file.is_null()) {
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    std::map<std::string, json> leaves;
    flatten(file, "", leaves);
    for (const auto& [name, v] : leaves) {
      const auto* k = find_key(name);
      if (!k) throw ConfigError("unknown config key '" + name + "'");
      check_type(*k, v);
      cfg[pointer(name)] = v;
    }
  }
  for (const auto& [name, text] : flags) {
    const auto* k = find_key(name);
    if (!k) throw ConfigError("unknown config key '" + name + "'");
    cfg[pointer(name)] = parse_value(*k, text);
  }
  return cfg;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------

namespace {

std::string get_text(const json& cfg, const std::string& key) { return cfg.at(pointer(key)).get<std::string>(); }

fs::path out_dir(const json& cfg) { return fs::path(get_text(cfg, "paths.out_dir")); }

fs::path path_or(const json& cfg, const std::string& key, const fs::path& fallback) {
  const auto v = get_text(cfg, key);
  return v.empty() ? fallback : fs::path(v);
}

fs::path require_path(const json& cfg, const std::string& key) {
  const auto v = get_text(cfg, key);
  if (v.empty()) throw ConfigError("--" + key + " is required for this command");
  if (!fs::exists(v)) throw ConfigError("--" + key + " points to a missing file: " + v);
  return v;
}

std::uint64_t seed_of(const json& cfg) { return static_cast<std::uint64_t>(cfg.at("seed").get<long long>()); }

std::shared_ptr<const FeatureExtractor<Real>> make_extractor(const json& cfg) {
  const auto backend = get_text(cfg, "extractor.backend");
  const auto weights = get_text(cfg, "paths.extractor_weights");
  if (backend != "auto" && backend != "fallback" && backend != "vgg16")
    throw ConfigError("extractor.backend must be auto, fallback or vgg16");
  if (backend == "vgg16" || (backend == "auto" && !weights.empty())) {
    if (weights.empty()) throw ConfigError("extractor.backend=vgg16 requires --paths.extractor_weights");
    return load_vgg16_extractor<Real>(weights);
  }
  return make_fallback_extractor<Real>();
}

FusionConfig fusion_of(const json& cfg) {
  return FusionConfig{cfg.at(pointer("model.width")).get<Index>(), cfg.at(pointer("model.stream_edges")).get<Index>(),
                      cfg.at(pointer("model.iterations")).get<Index>()};
}

void write_text(const fs::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, p);
}

json read_json_artifact(const fs::path& p, const char* what) {
  std::ifstream in(p);
  if (!in) throw ConfigError(std::string(what) + " not found: " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + " " + p.string() + " does not parse: " + e.what());
  }
}

std::string epoch_name(const char* prefix, int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_epoch_%03d.hsds", prefix, epoch);
  return buf;
}

int cmd_search(const json& cfg) {
  SearchConfig sc;
  sc.lr_alpha = cfg.at(pointer("search.lr_alpha")).get<double>();
  sc.lr_beta = cfg.at(pointer("search.lr_beta")).get<double>();
  sc.lr_omega = cfg.at(pointer("search.lr_omega")).get<double>();
  sc.search_epochs = cfg.at(pointer("search.epochs")).get<int>();
  sc.batch_size = cfg.at(pointer("search.batch_size")).get<int>();
  sc.crop = cfg.at(pointer("search.crop")).get<Index>();
  sc.retain_p = cfg.at(pointer("search.retain_p")).get<std::size_t>();
  if (const auto& t = cfg.at(pointer("search.theta")); !t.is_null()) sc.theta = t.get<double>();
  sc.alpha_noise = cfg.at(pointer("search.alpha_noise")).get<double>();
  sc.fd_step = cfg.at(pointer("search.fd_step")).get<double>();
  sc.seed = seed_of(cfg);
  sc.fusion = fusion_of(cfg);
  try {
    sc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  const auto manifest_path = require_path(cfg, "paths.search_manifest");
  const auto pool_path = require_path(cfg, "paths.natural_pool");
  const auto manifest = load_manifest(manifest_path, Split::train);
  const auto [train_m, val_m] = split_by_hash(manifest, sc.seed);
  SearchData<Real> data{load_pairs(train_m), load_pairs(val_m), load_natural_pool(pool_path, derive_seed(sc.seed, "natural"))};
  auto extractor = make_extractor(cfg);

  const fs::path out = out_dir(cfg);
  fs::create_directories(out / "checkpoints");
  std::ofstream prune_log(out / "prune_log.ndjson", std::ios::trunc);
  std::cerr << "search: " << data.train.size() << " train / " << data.val.size() << " val pairs, extractor "
            << extractor->backend_name() << '\n';

  SearchHooks<Real> hooks;
  hooks.on_epoch = [&](const SearchState<Real>& s, int epoch, const std::vector<PruneEvent>& events) {
    for (const auto& e : events) prune_log << to_json(e).dump() << '\n';
    prune_log.flush();
    write_archive(out / "checkpoints" / epoch_name("search", epoch), search_checkpoint(s, epoch));
    double lt = 0, gh = 0;
    int n = 0;
    for (const auto& r : s.history)
      if (r.epoch == epoch) {
        lt += r.l_train;
        gh += r.gamma_h;
        ++n;
      }
    std::cerr << "search epoch " << epoch + 1 << "/" << sc.search_epochs << ": L_train " << lt / n << ", Gamma_H " << gh / n
              << ", pruned " << events.size() << '\n';
  };
  auto state = run_search<Real>(sc, data, extractor, hooks);

  apply_finalization(state.model.arch, retention_finalize(state.model.arch));
  json arch{{"fusion", to_json(state.model.config)}, {"arch", arch_to_json(state.model.arch)}};
  write_text(out / "architecture.json", arch.dump(2) + "\n");
  write_text(out / "loss_weights.json", loss_report(state.loss).dump(2) + "\n");
  write_text(out / "history.csv", history_csv(state.history));
  std::cerr << "search: artifacts written to " << out.string() << '\n';
  return kExitOk;
}

int cmd_train(const json& cfg) {
  TrainConfig tc;
  tc.epochs = cfg.at(pointer("train.epochs")).get<int>();
  tc.batch_size = cfg.at(pointer("train.batch_size")).get<int>();
  tc.lr = cfg.at(pointer("train.lr")).get<double>();
  tc.crop = cfg.at(pointer("train.crop")).get<Index>();
  tc.seed = seed_of(cfg);
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const fs::path out = out_dir(cfg);
  const auto arch_doc = read_json_artifact(path_or(cfg, "paths.architecture", out / "architecture.json"), "architecture");
  const auto loss_doc = read_json_artifact(path_or(cfg, "paths.loss_report", out / "loss_weights.json"), "loss report");
  FusionModel<Real> model;
  LossParams<Real> loss;
  try {
    model = make_trained_model_skeleton<Real>(fusion_config_from_json(arch_doc.at("fusion")), arch_doc.at("arch"), tc.seed);
    loss = loss_params_from_report<Real>(loss_doc);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid search artifacts: ") + e.what());
  }
  auto manifest_key = get_text(cfg, "paths.train_manifest").empty() ? "paths.search_manifest" : "paths.train_manifest";
  const auto pairs = load_pairs(load_manifest(require_path(cfg, manifest_key), Split::train));
  auto state = make_train_state<Real>(tc, std::move(model), std::move(loss), make_extractor(cfg));
  if (const auto resume = get_text(cfg, "train.resume"); !resume.empty()) {
    load_train_checkpoint(state, read_archive(resume));
    std::cerr << "train: resumed after epoch " << state.epochs_done << '\n';
  }
  fs::create_directories(out / "checkpoints");
  TrainHooks<Real> hooks;
  hooks.on_epoch = [&](const TrainState<Real>& s) {
    write_archive(out / "checkpoints" / epoch_name("train", s.epochs_done - 1), train_checkpoint(s));
    std::cerr << "train epoch " << s.epochs_done << "/" << tc.epochs << ": loss " << s.epoch_loss.back() << '\n';
  };
  run_train(state, pairs, hooks);
  write_archive(path_or(cfg, "paths.checkpoint", out / "model.hsds"), train_checkpoint(state));
  return kExitOk;
}

FusionModel<Real> load_model(const fs::path& checkpoint) {
  const auto ar = read_archive(checkpoint);
  Rng rng(0);
  auto m = make_fusion_model<Real>(fusion_config_from_json(ar.meta.at("fusion")), rng);
  arch_apply_json(m.arch, ar.meta.at("arch"));
  get_omega(ar, m);
  return m;
}

Image fuse_images(const FusionModel<Real>& m, const Image& under, const Image& over) {
  if (under.height() != over.height() || under.width() != over.width())
    throw DimensionMismatch("fuse: under and over differ in size");
  const auto out = fuse(m, under.to_rgb().to_tensor<Real>(), over.to_rgb().to_tensor<Real>());
  return image_from_tensor(out);
}

int cmd_fuse(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const auto ckpt = path_or(cfg, "paths.checkpoint", out / "model.hsds");
  const auto u = get_text(cfg, "fuse.under"), o = get_text(cfg, "fuse.over");
  const auto manifest = get_text(cfg, "paths.fuse_manifest");
  if (u.empty() != o.empty()) throw ConfigError("--fuse.under and --fuse.over must be given together");
  if (u.empty() && manifest.empty()) throw ConfigError("fuse needs --paths.fuse_manifest or --fuse.under/--fuse.over");
  const auto model = load_model(ckpt);
  if (!u.empty()) {
    const auto target = path_or(cfg, "fuse.output", out / "fused.png");
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    write_png(target, fuse_images(model, read_image(u), read_image(o)));
    return kExitOk;
  }
  const auto fused_dir = path_or(cfg, "paths.fused_dir", out / "fused");
  fs::create_directories(fused_dir);
  const auto m = load_manifest(require_path(cfg, "paths.fuse_manifest"), Split::test);
  for (const auto& e : m.entries) {
    const auto pair = load_exposure_pair(e);
    write_png(fused_dir / (e.id + ".png"), fuse_images(model, pair.under, pair.over));
  }
  std::cerr << "fuse: wrote " << m.entries.size() << " image(s) to " << fused_dir.string() << '\n';
  return kExitOk;
}

int cmd_eval(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const auto key = get_text(cfg, "paths.eval_manifest").empty() ? "paths.fuse_manifest" : "paths.eval_manifest";
  const auto m = load_manifest(require_path(cfg, key), Split::test);
  const auto fused_dir = path_or(cfg, "paths.fused_dir", out / "fused");
  std::vector<FusedSample> samples;
  std::map<std::string, std::string> missing;
  for (const auto& e : m.entries) {
    const auto p = fused_dir / (e.id + ".png");
    if (!fs::exists(p)) {
      missing[e.id] = "fused image not found: " + p.string();
      continue;
    }
    samples.push_back({e.id, read_image(p), load_exposure_pair(e)});
  }
  if (samples.empty()) {
    std::cerr << "error: no fused images found in " << fused_dir.string() << '\n';
    return kExitRuntime;
  }
  auto rep = evaluate_report(samples);
  for (const auto& [id, msg] : missing) rep.errors[id]["*"] = msg;
  for (const auto& n : rep.notes) std::cerr << "eval: " << n << '\n';
  for (const auto& [id, errs] : rep.errors)
    for (const auto& [metric, msg] : errs) std::cerr << "eval: " << id << " " << metric << ": " << msg << '\n';
  fs::create_directories(out);
  write_report(rep, out / "report.json", out / "report.csv");
  if (rep.aggregate.empty()) return kExitRuntime;
  std::cerr << "eval: report written to " << (out / "report.json").string() << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Multi-exposure fusion with joint architecture and loss search"};
  app.name("hsds");
  app.fallthrough();
  app.require_subcommand(1, 1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file");
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  for (const auto& k : config_keys()) options[k.name] = app.add_option("--" + k.name, values[k.name], k.help);
  app.add_subcommand("search", "run the dual search and write architecture, loss weights, prune log and history");
  app.add_subcommand("train", "train the searched architecture under the searched loss");
  app.add_subcommand("fuse", "fuse exposure pairs with a trained checkpoint");
  app.add_subcommand("eval", "compute fusion metrics for fused images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    std::map<std::string, std::string> flags;
    for (const auto& [name, opt] : options)
      if (opt->count() > 0) flags[name] = values[name];
    const json file = config_path.empty() ? json() : read_config_file(config_path);
    const json cfg = resolve_config(file, flags);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "search") return cmd_search(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "fuse") return cmd_fuse(cfg);
    return cmd_eval(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace hsds::cli
