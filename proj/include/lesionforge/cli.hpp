#pragma once

// Command-line front end. Each subcommand resolves a JSON config from its
// defaults, an optional --config document and explicit flags (in that order
// of precedence), runs, and writes manifest.json next to its outputs.
// Feeding a manifest back through --config repeats the run.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lesionforge/checkpoint.hpp"
#include "lesionforge/data.hpp"
#include "lesionforge/latent.hpp"
#include "lesionforge/rater.hpp"
#include "lesionforge/swd.hpp"
#include "lesionforge/trainer.hpp"
#include "lesionforge/vtt/server.hpp"

namespace lesionforge::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolName = "lesionforge";
inline constexpr const char* kToolVersion = "0.1.0";

/// Bad invocation: reported with usage text and exit code 2.
struct UsageError : Error {
  using Error::Error;
};

struct Context {
  json& config;
  fs::path out;
  bool out_given = false;
  std::ostream& stdout_;
  std::ostream& stderr_;
};

struct RunResult {
  std::vector<std::string> artifacts;  // relative to manifest_dir
  std::optional<fs::path> manifest_dir;
};

// ---------------------------------------------------------------------------
// Helpers

inline json read_json_file(const fs::path& p) {
  const auto raw = read_file_bytes(p);
  try {
    return json::parse(raw.begin(), raw.end());
  } catch (const json::parse_error& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

inline std::string read_text_file(const fs::path& p) {
  const auto raw = read_file_bytes(p);
  return {raw.begin(), raw.end()};
}

inline void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_bytes(p, text.data(), text.size());
}

inline std::string format_index(const char* prefix, std::size_t i, const char* suffix, int width = 5) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu%s", prefix, width, i, suffix);
  return buf;
}

/// A checkpoint directory, a training run directory, or its checkpoints/.
inline fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.txt")) return p;
  for (const auto& dir : {p / "checkpoints", p}) {
    if (fs::exists(dir / "latest")) {
      std::string name = read_text_file(dir / "latest");
      while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
      return dir / name;
    }
  }
  throw IoError("no checkpoint at " + p.string());
}

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && has_image_extension(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

/// Largest power of two that fits the first decodable image of each dir.
inline std::size_t common_power_of_two(const std::vector<fs::path>& dirs) {
  std::size_t res = 0;
  for (const auto& d : dirs) {
    std::optional<std::size_t> side;
    for (const auto& f : sorted_images(d)) {
      try {
        const RgbImage img = read_image(f);
        side = std::min(img.width, img.height);
        break;
      } catch (const IoError&) {
      }
    }
    if (!side) throw ArgumentError("no decodable images under " + d.string());
    std::size_t p = 1;
    while (p * 2 <= *side) p *= 2;
    res = res == 0 ? p : std::min(res, p);
  }
  return res;
}

inline Tensor<float> stack_records(const std::vector<ImageRecord>& records) {
  std::vector<std::size_t> all(records.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return stack_batch<float>(records, all);
}

/// Model samples for `zs` at the target resolution, 64 latents at a time.
inline Tensor<float> sample_images(GanModel& model, const std::vector<LatentVector>& zs) {
  std::vector<float> values;
  Shape shape;
  for (std::size_t i = 0; i < zs.size(); i += 64) {
    std::vector<LatentVector> chunk(zs.begin() + i, zs.begin() + std::min(zs.size(), i + 64));
    Tensor<float> img = model.sample_at_target(latents_to_tensor<float>(chunk));
    values.insert(values.end(), img.data().begin(), img.data().end());
    shape = img.shape();
  }
  shape[0] = zs.size();
  return Tensor<float>(shape, values);
}

inline std::vector<ImageRecord> training_data(const json& cfg, std::size_t resolution) {
  const std::string data = cfg.at("data").get<std::string>();
  const std::size_t synth = cfg.at("synth").get<std::size_t>();
  if (!data.empty() && synth) throw UsageError("give either --data or --synth, not both");
  if (!data.empty()) {
    if (is_prepared_dir(data)) return load_prepared(data);
    return load_dataset(scan_dataset(data, resolution));
  }
  if (synth) return synth_blob_dataset(cfg.at("synth_seed").get<std::uint64_t>(), synth, resolution);
  throw UsageError("train needs --data DIR or --synth N");
}

// ---------------------------------------------------------------------------
// Flag binding: an option writes its value into the config only when given.

class Bindings {
 public:
  template <class T>
  CLI::Option* option(CLI::App* app, const std::string& flags, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flags, *value, help);
    setters_.push_back([opt, value, key](json& cfg) {
      if (opt->count()) cfg[json::json_pointer(key)] = *value;
    });
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& flags, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app->add_flag(flags, *value, help);
    setters_.push_back([opt, value, key](json& cfg) {
      if (opt->count()) cfg[json::json_pointer(key)] = *value;
    });
    return opt;
  }

  void apply(json& cfg) const {
    for (const auto& s : setters_) s(cfg);
  }

 private:
  std::vector<std::function<void(json&)>> setters_;
};

struct Subcommand {
  std::string name;  // "train", "study create"
  CLI::App* app = nullptr;
  fs::path default_out;
  json defaults;
  std::set<std::string> optional_keys;  // accepted in config files though absent from defaults
  Bindings bindings;
  std::function<RunResult(Context&)> run;
};

// ---------------------------------------------------------------------------
// Subcommands

inline RunResult run_prepare(Context& c) {
  const auto index = scan_dataset(c.config.at("input").get<std::string>(), c.config.at("resolution").get<std::size_t>());
  const json doc = write_prepared(index, c.out);
  for (const auto& s : index.skipped) c.stderr_ << "skipped " << s.path.string() << ": " << s.reason << '\n';
  c.stdout_ << json{{"images", doc["images"].size()}, {"skipped", doc["skipped"].size()}, {"out", c.out.string()}}.dump() << '\n';
  return {{"index.json", "cache"}, c.out};
}

inline RunResult run_synth(Context& c) {
  const auto seed = c.config.at("seed").get<std::uint64_t>();
  const auto count = c.config.at("count").get<std::size_t>();
  const auto res = c.config.at("resolution").get<std::size_t>();
  if (count == 0) throw ArgumentError("synth-data needs count >= 1");
  std::string lines;
  for (std::size_t i = 0; i < count; ++i) {
    const BlobSample s = synth_blob_image(seed, i, res);
    const std::string name = format_index("images/blob_", i, ".png");
    write_png(c.out / name, s.image);
    lines += json{{"file", name}, {"coverage", s.coverage}}.dump() + "\n";
  }
  write_text_file(c.out / "blobs.jsonl", lines);
  c.stdout_ << json{{"count", count}, {"resolution", res}, {"out", c.out.string()}}.dump() << '\n';
  return {{"images", "blobs.jsonl"}, c.out};
}

inline RunResult run_train(Context& c) {
  json& cfg = c.config;
  TrainConfig tc = TrainConfig::from_json(cfg);
  tc.validate();
  auto data = training_data(cfg, tc.target_resolution);
  const std::string resume = cfg.at("resume").get<std::string>();
  Trainer trainer = resume.empty() ? Trainer(tc, std::move(data)) : Trainer::load_checkpoint(resolve_checkpoint(resume), std::move(data));
  if (!resume.empty()) tc = trainer.config();

  json resolved = tc.to_json();
  for (const char* k : {"data", "synth", "synth_seed", "resume"}) resolved[k] = cfg.at(k);
  cfg = resolved;

  const std::uint64_t every = std::max<std::uint64_t>(1, tc.total_iterations / 20);
  trainer.run(c.out, [&](const TrainLogRecord& r) {
    if (r.iteration % every == 0 || r.iteration + 1 == tc.total_iterations)
      c.stderr_ << "iter " << r.iteration << "/" << tc.total_iterations << " res " << r.resolution << " alpha " << r.alpha << " d "
                << r.d_loss << " g " << r.g_loss << '\n';
  });

  std::istringstream swd(read_text_file(c.out / "swd_log.jsonl"));
  std::string line, first, last;
  while (std::getline(swd, line)) {
    if (line.empty()) continue;
    if (first.empty()) first = line;
    last = line;
  }
  std::string latest = read_text_file(c.out / "checkpoints" / "latest");
  while (!latest.empty() && latest.back() == '\n') latest.pop_back();
  c.stdout_ << json{{"iterations", tc.total_iterations},
                    {"initial_swd", json::parse(first)["swd"]["average"]},
                    {"final_swd", json::parse(last)["swd"]["average"]},
                    {"checkpoint", "checkpoints/" + latest},
                    {"out", c.out.string()}}
                   .dump()
            << '\n';
  return {{"log.jsonl", "events.jsonl", "swd_log.jsonl", "checkpoints/" + latest}, c.out};
}

inline GanModel load_model(const json& cfg) {
  const std::string path = cfg.at("checkpoint").get<std::string>();
  if (path.empty()) throw UsageError("--checkpoint is required");
  return GanModel::from_checkpoint(Checkpoint::load(resolve_checkpoint(path)));
}

inline RunResult run_generate(Context& c) {
  const json& cfg = c.config;
  GanModel model = load_model(cfg);
  const auto count = cfg.at("count").get<std::size_t>();
  const auto zs = sample_latents(cfg.at("seed").get<std::uint64_t>(), count, model.config().latent_dim, cfg.at("first").get<std::uint64_t>());
  const Tensor<float> images = sample_images(model, zs);
  std::vector<std::string> artifacts = {"grid.png"};
  const auto png = render_grid(images, cfg.at("columns").get<std::size_t>(), cfg.at("border").get<std::size_t>());
  write_file_bytes(c.out / "grid.png", png.data(), png.size());
  if (cfg.at("samples").get<bool>()) {
    for (std::size_t i = 0; i < count; ++i) write_png(c.out / format_index("samples/sample_", i, ".png"), denormalize(images, i));
    artifacts.push_back("samples");
  }
  c.stdout_ << json{{"grid", (c.out / "grid.png").string()}, {"count", count}, {"resolution", images.dim(2)}}.dump() << '\n';
  return {artifacts, c.out};
}

inline RunResult run_walk(Context& c) {
  json& cfg = c.config;
  if (cfg.at("anchors").empty()) {
    const auto n = cfg.at("n_anchors").get<std::size_t>();
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    for (std::size_t k = 0; k < n; ++k) cfg["anchors"].push_back(derive_seed(seed, {stream::kLatent, k}));
  }
  const WalkSpec spec = WalkSpec::from_json(cfg);
  GanModel model = load_model(cfg);
  const Tensor<float> frames = sample_images(model, walk_latents(spec, model.config().latent_dim));

  std::size_t columns = cfg.at("columns").get<std::size_t>();
  if (columns == 0) columns = spec.steps;
  const auto png = render_grid(frames, columns, cfg.at("border").get<std::size_t>());
  write_file_bytes(c.out / "walk.png", png.data(), png.size());
  json distances = json::array();
  for (std::size_t i = 0; i + 1 < frames.dim(0); ++i) {
    write_png(c.out / format_index("frames/frame_", i, ".png", 3), denormalize(frames, i));
    distances.push_back(mean_abs_difference(frames, i, frames, i + 1));
  }
  write_png(c.out / format_index("frames/frame_", frames.dim(0) - 1, ".png", 3), denormalize(frames, frames.dim(0) - 1));
  const json summary = {{"spec", spec.to_json()}, {"frames", frames.dim(0)}, {"step_distances", distances}};
  write_text_file(c.out / "walk.json", summary.dump(2) + "\n");
  c.stdout_ << json{{"walk", (c.out / "walk.png").string()}, {"frames", frames.dim(0)}}.dump() << '\n';
  return {{"walk.png", "walk.json", "frames"}, c.out};
}

inline RunResult run_swd(Context& c) {
  json& cfg = c.config;
  const fs::path a = cfg.at("a").get<std::string>(), b = cfg.at("b").get<std::string>();
  if (a.empty() || b.empty()) throw UsageError("swd needs --a DIR and --b DIR");
  std::size_t res = cfg.at("resolution").get<std::size_t>();
  if (res == 0) cfg["resolution"] = res = common_power_of_two({a, b});
  auto load = [&](const fs::path& dir) {
    auto index = scan_dataset(dir, res);
    const auto limit = cfg.at("max_images").get<std::size_t>();
    if (limit && index.entries.size() > limit) index.entries.resize(limit);
    return stack_records(load_dataset(index));
  };
  SwdConfig sc = SwdConfig::from_json(cfg.at("swd"));
  sc.seed = cfg.at("seed").get<std::uint64_t>();
  const SwdReport report = swd_report(load(a), load(b), sc);
  const std::string text = report.to_json().dump(2) + "\n";
  c.stdout_ << text;
  if (!c.out_given) return {};
  write_text_file(c.out / "swd.json", text);
  return {{"swd.json"}, c.out};
}

inline RunResult run_study_create(Context& c) {
  json& cfg = c.config;
  if (cfg.at("real").get<std::string>().empty() || cfg.at("fake").get<std::string>().empty())
    throw UsageError("study create needs --real DIR and --fake DIR");
  if (cfg.at("created").get<std::string>().empty()) cfg["created"] = vtt::utc_now();
  vtt::StudyStore store(c.out);
  const vtt::StudyState s = store.create_study(vtt::image_sources(cfg.at("real")), vtt::image_sources(cfg.at("fake")),
                                               vtt::StudyConfig::from_json(cfg), cfg.at("created").get<std::string>());
  c.stdout_ << json{{"study", s.id}, {"items", s.items.size()}, {"created", s.created}, {"root", c.out.string()}}.dump() << '\n';
  return {{"log.jsonl", "truth.json", "images"}, c.out / s.id};
}

inline std::atomic<bool> g_stop_requested{false};

inline RunResult run_study_serve(Context& c) {
  const json& cfg = c.config;
  std::string token = cfg.at("token").get<std::string>();
  if (token.empty())
    if (const char* env = std::getenv("LESIONFORGE_TOKEN")) token = env;
  if (token.empty()) throw UsageError("study serve needs --token or LESIONFORGE_TOKEN");
  vtt::StudyStore store(cfg.at("root").get<std::string>());
  vtt::VttServer server(store, {token, cfg.at("ui").get<std::string>()});
  const std::string host = cfg.at("host").get<std::string>();
  const int port = server.bind(host, cfg.at("port").get<int>());
  c.stderr_ << "serving " << store.study_ids().size() << " studies from " << store.root().string() << " on http://" << host << ":"
            << port << '\n'
            << std::flush;

  g_stop_requested = false;
  auto on_signal = +[](int) { g_stop_requested = true; };
  auto old_int = std::signal(SIGINT, on_signal);
  auto old_term = std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  server.listen();
  g_stop_requested = true;
  watcher.join();
  std::signal(SIGINT, old_int);
  std::signal(SIGTERM, old_term);
  return {};
}

inline RunResult run_study_export(Context& c) {
  const json& cfg = c.config;
  vtt::StudyStore store(cfg.at("root").get<std::string>());
  const std::string study = cfg.at("study").get<std::string>();
  if (study.empty()) throw UsageError("study export needs --study ID");
  const auto rows = store.export_results(study);
  const std::string format = cfg.at("format").get<std::string>();
  std::string name;
  if (format == "jsonl") {
    name = "export.jsonl";
    write_text_file(c.out / name, vtt::export_jsonl(rows));
  } else if (format == "csv") {
    name = "export.csv";
    write_text_file(c.out / name, vtt::export_csv(rows));
  } else {
    throw UsageError("unknown export format " + format + " (jsonl|csv)");
  }
  c.stdout_ << json{{"study", study}, {"rows", rows.size()}, {"export", (c.out / name).string()}}.dump() << '\n';
  return {{name}, c.out};
}

inline RunResult run_study_analyze(Context& c) {
  const std::string path = c.config.at("ratings").get<std::string>();
  if (path.empty()) throw UsageError("study analyze needs --ratings FILE");
  const RaterReport report = rater_report(parse_ratings(read_text_file(path)));
  const std::string j = report.to_json().dump(2) + "\n";
  write_text_file(c.out / "report.json", j);
  write_text_file(c.out / "report.txt", report.to_text());
  c.stdout_ << j;
  return {{"report.json", "report.txt"}, c.out};
}

// ---------------------------------------------------------------------------
// Dispatch

inline json train_defaults() {
  json j = TrainConfig().to_json();
  j["schedule"] = "";  // derived from the iteration budget unless given
  j["data"] = "";
  j["synth"] = 0;
  j["synth_seed"] = 0;
  j["resume"] = "";
  return j;
}

inline json swd_defaults() {
  json j = SwdConfig().to_json();
  j.erase("seed");  // the global --seed drives projections
  return j;
}

class Cli {
 public:
  Cli() : app_("Synthetic lesion GAN toolkit: data, training, sampling, SWD and the visual Turing test.", kToolName) {
    app_.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
    app_.add_option("--seed", seed_, "Run seed");
    app_.add_option("--out", out_, "Output directory");
    app_.add_option("--config", config_path_, "JSON config or a manifest.json from an earlier run");
    app_.require_subcommand(0, 1);
    app_.fallthrough();
    build();
  }

  int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv = {kToolName};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app_.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << help_target()->help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app_.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::CallForVersion&) {
      out << kToolName << ' ' << kToolVersion << '\n';
      return 0;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n\n" << help_target()->help();
      return 2;
    }

    Subcommand* sub = nullptr;
    try {
      json file = json::object();
      std::optional<std::string> file_sub;
      if (config_path_) {
        file = read_json_file(*config_path_);
        if (!file.is_object()) throw IoError(*config_path_ + ": config must be a JSON object");
        if (file.contains("subcommand") && file.contains("config")) {
          file_sub = file["subcommand"].get<std::string>();
          file = file["config"];
        }
      }
      sub = selected();
      if (!sub && file_sub) sub = find(*file_sub);
      if (!sub) throw UsageError(file_sub ? "unknown subcommand " + *file_sub + " in " + *config_path_ : "no subcommand given");
      if (file_sub && *file_sub != sub->name)
        throw UsageError(*config_path_ + " is a manifest for '" + *file_sub + "', not '" + sub->name + "'");

      json cfg = sub->defaults;
      for (const auto& [k, v] : file.items())
        if (!cfg.contains(k) && !sub->optional_keys.count(k)) throw UsageError("unknown config key '" + k + "' for " + sub->name);
      cfg.merge_patch(file);
      if (seed_) {
        if (!cfg.contains("seed")) throw UsageError(sub->name + " takes no --seed");
        cfg["seed"] = *seed_;
      }
      sub->bindings.apply(cfg);

      Context ctx{cfg, out_ ? fs::path(*out_) : sub->default_out, out_.has_value(), out, err};
      if (ctx.out_given || sub->name != "swd") fs::create_directories(ctx.out);
      const RunResult result = sub->run(ctx);
      if (result.manifest_dir) {
        json manifest = {{"tool", kToolName},
                         {"version", kToolVersion},
                         {"subcommand", sub->name},
                         {"seed", cfg.contains("seed") ? cfg["seed"] : json(nullptr)},
                         {"config", cfg},
                         {"artifacts", result.artifacts}};
        write_text_file(*result.manifest_dir / "manifest.json", manifest.dump(2) + "\n");
      }
      return 0;
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n\n" << (sub ? sub->app : &app_)->help();
      return 2;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }

 private:
  Subcommand& add(CLI::App* parent, const std::string& name, const std::string& help, json defaults,
                  std::function<RunResult(Context&)> run) {
    auto sub = std::make_unique<Subcommand>();
    const std::string leaf = name.substr(name.rfind(' ') == std::string::npos ? 0 : name.rfind(' ') + 1);
    sub->name = name;
    std::string slug = name;
    std::replace(slug.begin(), slug.end(), ' ', '-');
    sub->default_out = fs::path("runs") / slug;
    sub->app = parent->add_subcommand(leaf, help);
    sub->app->fallthrough();
    sub->defaults = std::move(defaults);
    sub->run = std::move(run);
    subs_.push_back(std::move(sub));
    return *subs_.back();
  }

  void build() {
    {
      auto& s = add(&app_, "prepare-data", "Scan, crop, resize and cache an image directory",
                    {{"input", ""}, {"resolution", 16}}, run_prepare);
      s.bindings.option<std::string>(s.app, "--input,--data", "/input", "Image directory");
      s.bindings.option<std::size_t>(s.app, "--resolution,--target-res", "/resolution", "Output resolution (power of two)");
    }
    {
      auto& s = add(&app_, "synth-data", "Write the synthetic blob dataset as PNGs",
                    {{"seed", 0}, {"count", 2000}, {"resolution", 16}}, run_synth);
      s.bindings.option<std::size_t>(s.app, "--count", "/count", "Number of images");
      s.bindings.option<std::size_t>(s.app, "--resolution", "/resolution", "Image side");
    }
    {
      auto& s = add(&app_, "train", "Train a dcgan, lapgan or pgan model", train_defaults(), run_train);
      s.optional_keys = {"adam"};
      auto* a = s.app;
      s.bindings.option<std::string>(a, "--arch", "/architecture", "dcgan|lapgan|pgan")->check(CLI::IsMember({"dcgan", "lapgan", "pgan"}));
      s.bindings.option<std::size_t>(a, "--target-res", "/target_resolution", "Output resolution");
      s.bindings.option<std::uint64_t>(a, "--iters", "/iterations", "Minibatch updates");
      s.bindings.option<std::size_t>(a, "--minibatch", "/minibatch", "Minibatch size");
      s.bindings.option<std::size_t>(a, "--latent", "/latent_dim", "Latent dimension");
      s.bindings.option<std::size_t>(a, "--base-channels", "/base_channels", "Widest layer");
      s.bindings.option<std::string>(a, "--schedule", "/schedule", "PGAN schedule, e.g. 4:stabilize:600,8:fade:600,8:stabilize:600,16:fade:600,16:stabilize:600");
      s.bindings.option<std::size_t>(a, "--lapgan-levels", "/lapgan_levels", "Pyramid levels (0 = automatic)");
      s.bindings.option<std::uint64_t>(a, "--checkpoint-every", "/checkpoint_every", "Checkpoint interval");
      s.bindings.option<std::uint64_t>(a, "--swd-every", "/swd_eval_every", "SWD evaluation interval (0 = end only)");
      s.bindings.option<std::size_t>(a, "--swd-images", "/swd_images", "Images per SWD evaluation");
      s.bindings.option<std::size_t>(a, "--swd-projections", "/swd/n_projections", "Random directions per repeat");
      s.bindings.option<std::uint64_t>(a, "--log-every", "/log_every", "Log interval");
      s.bindings.option<double>(a, "--lr", "/adam/lr", "Adam learning rate");
      s.bindings.option<std::string>(a, "--loss", "/generator_loss", "non-saturating|saturating")
          ->check(CLI::IsMember({"non-saturating", "saturating"}));
      s.bindings.flag(a, "--wallclock,!--no-wallclock", "/record_wallclock", "Record step times (breaks byte-identical logs)");
      s.bindings.option<std::string>(a, "--data", "/data", "Image directory or prepare-data output");
      s.bindings.option<std::size_t>(a, "--synth", "/synth", "Train on N synthetic blobs");
      s.bindings.option<std::uint64_t>(a, "--synth-seed", "/synth_seed", "Seed of the synthetic blobs");
      s.bindings.option<std::string>(a, "--resume", "/resume", "Continue from a checkpoint or run directory");
    }
    {
      auto& s = add(&app_, "generate", "Sample a checkpoint into a PNG grid",
                    {{"seed", 0}, {"checkpoint", ""}, {"count", 16}, {"columns", 4}, {"first", 0}, {"border", 1}, {"samples", true}},
                    run_generate);
      s.bindings.option<std::string>(s.app, "--checkpoint", "/checkpoint", "Checkpoint or run directory");
      s.bindings.option<std::size_t>(s.app, "--count", "/count", "Number of samples");
      s.bindings.option<std::size_t>(s.app, "--columns", "/columns", "Grid columns");
      s.bindings.option<std::uint64_t>(s.app, "--first", "/first", "Index of the first latent");
      s.bindings.option<std::size_t>(s.app, "--border", "/border", "Cell border in pixels");
      s.bindings.flag(s.app, "--samples,!--no-samples", "/samples", "Also write one PNG per sample");
    }
    {
      auto& s = add(&app_, "walk", "Interpolate between latent anchors",
                    {{"seed", 0}, {"checkpoint", ""}, {"anchors", json::array()}, {"n_anchors", 3}, {"steps", 8},
                     {"mode", "linear"}, {"columns", 0}, {"border", 1}},
                    run_walk);
      s.bindings.option<std::string>(s.app, "--checkpoint", "/checkpoint", "Checkpoint or run directory");
      s.bindings.option<std::vector<std::uint64_t>>(s.app, "--anchors", "/anchors", "Anchor latent seeds");
      s.bindings.option<std::size_t>(s.app, "--n-anchors", "/n_anchors", "Anchors derived from --seed when none are listed");
      s.bindings.option<std::size_t>(s.app, "--steps", "/steps", "Points per segment, anchors included");
      s.bindings.option<std::string>(s.app, "--mode", "/mode", "linear|spherical")->check(CLI::IsMember({"linear", "spherical"}));
      s.bindings.option<std::size_t>(s.app, "--columns", "/columns", "Grid columns (0 = steps)");
    }
    {
      auto& s = add(&app_, "swd", "Sliced Wasserstein distance between two image directories",
                    {{"seed", 0}, {"a", ""}, {"b", ""}, {"resolution", 0}, {"max_images", 0}, {"swd", swd_defaults()}}, run_swd);
      s.bindings.option<std::string>(s.app, "--a", "/a", "First image directory");
      s.bindings.option<std::string>(s.app, "--b", "/b", "Second image directory");
      s.bindings.option<std::size_t>(s.app, "--resolution", "/resolution", "Compare at this resolution (0 = largest common)");
      s.bindings.option<std::size_t>(s.app, "--max-images", "/max_images", "Use at most N images per side (0 = all)");
      s.bindings.option<std::size_t>(s.app, "--patch-size", "/swd/patch_size", "Patch side");
      s.bindings.option<std::size_t>(s.app, "--patches", "/swd/patches_per_image", "Patches per image and level");
      s.bindings.option<std::size_t>(s.app, "--projections", "/swd/n_projections", "Random directions per repeat");
      s.bindings.option<std::size_t>(s.app, "--repeats", "/swd/n_repeats", "Projection draws averaged");
      s.bindings.option<std::size_t>(s.app, "--min-res", "/swd/min_resolution", "Coarsest pyramid level");
    }

    CLI::App* study = app_.add_subcommand("study", "Visual Turing test studies");
    study->require_subcommand(1);
    study->fallthrough();
    {
      auto& s = add(study, "study create", "Assemble a blinded study (store root is --out)",
                    {{"seed", 0}, {"real", ""}, {"fake", ""}, {"n_real", 50}, {"n_fake", 30}, {"resolution", 0}, {"created", ""}},
                    run_study_create);
      s.default_out = "studies";
      s.bindings.option<std::string>(s.app, "--real", "/real", "Real image directory");
      s.bindings.option<std::string>(s.app, "--fake", "/fake", "Generated image directory");
      s.bindings.option<std::size_t>(s.app, "--n-real", "/n_real", "Real items");
      s.bindings.option<std::size_t>(s.app, "--n-fake", "/n_fake", "Generated items");
      s.bindings.option<std::size_t>(s.app, "--resolution", "/resolution", "Common item size (0 = the fakes' size)");
      s.bindings.option<std::string>(s.app, "--created", "/created", "Creation timestamp to record");
    }
    {
      auto& s = add(study, "study serve", "Serve studies over HTTP",
                    {{"root", "studies"}, {"host", "127.0.0.1"}, {"port", 8080}, {"token", ""}, {"ui", ""}}, run_study_serve);
      s.bindings.option<std::string>(s.app, "--root", "/root", "Study store directory");
      s.bindings.option<std::string>(s.app, "--host", "/host", "Listen address");
      s.bindings.option<int>(s.app, "--port", "/port", "Listen port (0 = any)");
      s.bindings.option<std::string>(s.app, "--token", "/token", "Operator bearer token (or LESIONFORGE_TOKEN)");
      s.bindings.option<std::string>(s.app, "--ui", "/ui", "Static client directory served under /ui");
    }
    {
      auto& s = add(study, "study export", "Write a study's responses with ground truth",
                    {{"root", "studies"}, {"study", ""}, {"format", "jsonl"}}, run_study_export);
      s.bindings.option<std::string>(s.app, "--root", "/root", "Study store directory");
      s.bindings.option<std::string>(s.app, "--study", "/study", "Study id");
      s.bindings.option<std::string>(s.app, "--format", "/format", "jsonl|csv");
    }
    {
      auto& s = add(study, "study analyze", "Rater metrics and Fleiss' kappa from an export", {{"ratings", ""}}, run_study_analyze);
      s.bindings.option<std::string>(s.app, "--ratings,--export", "/ratings", "Export file (JSONL or CSV)");
    }
  }

  Subcommand* selected() {
    for (auto& s : subs_)
      if (s->app->parsed()) return s.get();
    return nullptr;
  }

  Subcommand* find(const std::string& name) {
    for (auto& s : subs_)
      if (s->name == name) return s.get();
    return nullptr;
  }

  CLI::App* help_target() {
    CLI::App* at = &app_;
    for (bool descended = true; descended;) {
      descended = false;
      for (CLI::App* s : at->get_subcommands())
        if (s->parsed()) {
          at = s;
          descended = true;
          break;
        }
    }
    return at;
  }

  CLI::App app_;
  std::optional<std::uint64_t> seed_;
  std::optional<std::string> out_;
  std::optional<std::string> config_path_;
  std::vector<std::unique_ptr<Subcommand>> subs_;
};

/// Parses `args` (without the program name), runs one subcommand and
/// returns the process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Cli cli;
  return cli.run(args, out, err);
}

}  // namespace lesionforge::cli
