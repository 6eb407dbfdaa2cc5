#pragma once

// Alternating adversarial training, stage orchestration, logging and
// checkpoint/resume.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lesionforge/adam.hpp"
#include "lesionforge/checkpoint.hpp"
#include "lesionforge/data.hpp"
#include "lesionforge/gan_zoo.hpp"
#include "lesionforge/latent.hpp"
#include "lesionforge/losses.hpp"
#include "lesionforge/swd.hpp"

namespace lesionforge {

enum class Architecture { kDcgan, kLapgan, kPgan };

inline Architecture parse_architecture(const std::string& s) {
  if (s == "dcgan") return Architecture::kDcgan;
  if (s == "lapgan") return Architecture::kLapgan;
  if (s == "pgan") return Architecture::kPgan;
  throw ArgumentError("unknown architecture '" + s + "' (dcgan|lapgan|pgan)");
}

inline const char* to_string(Architecture a) {
  switch (a) {
    case Architecture::kDcgan: return "dcgan";
    case Architecture::kLapgan: return "lapgan";
    case Architecture::kPgan: return "pgan";
  }
  return "?";
}

enum class GeneratorLoss { kNonSaturating, kSaturating };

struct TrainConfig {
  Architecture architecture = Architecture::kPgan;
  std::size_t latent_dim = 128;
  std::uint64_t total_iterations = 3000;  // minibatch updates
  std::size_t minibatch = 8;
  std::map<std::size_t, std::size_t> minibatch_by_resolution;
  std::uint64_t seed = 0;
  std::size_t target_resolution = 16;
  std::size_t base_channels = 64;
  std::string schedule;        // pgan; empty derives an even split of total_iterations
  std::size_t lapgan_levels = 0;  // 0: as many as fit above an 8x8 base
  std::uint64_t checkpoint_every = 1000;
  std::uint64_t swd_eval_every = 500;  // 0 disables periodic evaluation
  std::size_t swd_images = 256;
  SwdConfig swd;
  std::uint64_t log_every = 1;
  GeneratorLoss generator_loss = GeneratorLoss::kNonSaturating;
  std::optional<AdamConfig> adam;
  bool record_wallclock = false;

  AdamConfig adam_config() const {
    if (adam) return *adam;
    return architecture == Architecture::kPgan ? AdamConfig::progressive() : AdamConfig::dcgan();
  }

  std::size_t levels() const {
    if (lapgan_levels) return lapgan_levels;
    return log2_exact(target_resolution / 8) + 1;
  }

  ProgressiveSchedule resolved_schedule() const {
    if (!schedule.empty()) return ProgressiveSchedule::parse(schedule);
    const std::size_t growths = log2_exact(target_resolution / 4);
    const std::uint64_t stages = 1 + 2 * growths, each = total_iterations / stages;
    if (each == 0) throw ArgumentError("too few iterations for a " + std::to_string(stages) + "-stage schedule");
    return ProgressiveSchedule::uniform(4, target_resolution, each, each, each + total_iterations % stages);
  }

  std::size_t batch_size(std::size_t resolution) const {
    auto it = minibatch_by_resolution.find(resolution);
    return it == minibatch_by_resolution.end() ? minibatch : it->second;
  }

  void validate() const {
    if (!is_power_of_two(target_resolution) || target_resolution < 8)
      throw ArgumentError("target resolution must be a power of two >= 8");
    if (latent_dim == 0 || minibatch == 0 || total_iterations == 0 || base_channels == 0 || log_every == 0)
      throw ArgumentError("latent_dim, minibatch, iterations, base_channels and log_every must be positive");
    if (architecture == Architecture::kPgan) {
      auto s = resolved_schedule();
      if (s.target_resolution() != target_resolution)
        throw ArgumentError("schedule ends at " + std::to_string(s.target_resolution()) + ", target is " +
                            std::to_string(target_resolution));
      if (total_iterations < s.total())
        throw ArgumentError("total_iterations " + std::to_string(total_iterations) + " is shorter than the schedule (" +
                            std::to_string(s.total()) + ")");
      if (!minibatch_by_resolution.empty())
        for (auto r : s.resolutions())
          if (!minibatch_by_resolution.count(r))
            throw ArgumentError("minibatch map has no entry for resolution " + std::to_string(r));
    }
    if (architecture == Architecture::kLapgan) {
      if (levels() < 1 || (target_resolution >> (levels() - 1)) < 8)
        throw ArgumentError("lapgan levels leave a base below 8x8");
      if (total_iterations < levels()) throw ArgumentError("fewer iterations than lapgan levels");
    }
    swd.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json mb = nlohmann::json::object();
    for (auto [r, b] : minibatch_by_resolution) mb[std::to_string(r)] = b;
    nlohmann::json j = {{"architecture", to_string(architecture)},
                        {"latent_dim", latent_dim},
                        {"iterations", total_iterations},
                        {"minibatch", minibatch},
                        {"minibatch_by_resolution", mb},
                        {"seed", seed},
                        {"target_resolution", target_resolution},
                        {"base_channels", base_channels},
                        {"schedule", architecture == Architecture::kPgan ? resolved_schedule().to_string() : schedule},
                        {"lapgan_levels", lapgan_levels},
                        {"checkpoint_every", checkpoint_every},
                        {"swd_eval_every", swd_eval_every},
                        {"swd_images", swd_images},
                        {"swd", swd.to_json()},
                        {"log_every", log_every},
                        {"generator_loss", generator_loss == GeneratorLoss::kSaturating ? "saturating" : "non-saturating"},
                        {"record_wallclock", record_wallclock}};
    if (adam) j["adam"] = {{"lr", adam->lr}, {"beta1", adam->beta1}, {"beta2", adam->beta2}, {"epsilon", adam->epsilon}};
    return j;
  }

  /// Keys present in `j` override the fields of `base`.
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }

  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base) {
    TrainConfig c = std::move(base);
    if (j.contains("architecture")) c.architecture = parse_architecture(j["architecture"].get<std::string>());
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.total_iterations = j.value("iterations", c.total_iterations);
    c.minibatch = j.value("minibatch", c.minibatch);
    if (j.contains("minibatch_by_resolution")) {
      c.minibatch_by_resolution.clear();
      for (const auto& [k, v] : j["minibatch_by_resolution"].items()) c.minibatch_by_resolution[std::stoull(k)] = v.get<std::size_t>();
    }
    c.seed = j.value("seed", c.seed);
    c.target_resolution = j.value("target_resolution", c.target_resolution);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.schedule = j.value("schedule", c.schedule);
    c.lapgan_levels = j.value("lapgan_levels", c.lapgan_levels);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.swd_eval_every = j.value("swd_eval_every", c.swd_eval_every);
    c.swd_images = j.value("swd_images", c.swd_images);
    if (j.contains("swd")) c.swd = SwdConfig::from_json(j["swd"], c.swd);
    c.log_every = j.value("log_every", c.log_every);
    if (j.contains("generator_loss")) {
      const auto s = j["generator_loss"].get<std::string>();
      if (s == "saturating") c.generator_loss = GeneratorLoss::kSaturating;
      else if (s == "non-saturating") c.generator_loss = GeneratorLoss::kNonSaturating;
      else throw ArgumentError("unknown generator_loss '" + s + "'");
    }
    if (j.contains("adam")) {
      const auto& a = j["adam"];
      AdamConfig d = c.adam_config();
      c.adam = AdamConfig{a.value("lr", d.lr), a.value("beta1", d.beta1), a.value("beta2", d.beta2), a.value("epsilon", d.epsilon)};
    }
    c.record_wallclock = j.value("record_wallclock", c.record_wallclock);
    return c;
  }
};

struct TrainLogRecord {
  std::uint64_t iteration = 0;
  std::size_t resolution = 0;
  double alpha = 1.0;
  double d_loss = 0;
  double g_loss = 0;
  double d_real_mean = 0;
  double d_fake_mean = 0;
  std::optional<std::size_t> level;  // lapgan only
  std::optional<double> wallclock_ms;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"iteration", iteration}, {"resolution", resolution}, {"alpha", alpha},
                        {"d_loss", d_loss},       {"g_loss", g_loss},         {"d_real_mean", d_real_mean},
                        {"d_fake_mean", d_fake_mean}};
    if (level) j["level"] = *level;
    if (wallclock_ms) j["wallclock_ms"] = *wallclock_ms;
    return j;
  }
};

// ---------------------------------------------------------------------------
// One alternating update

namespace detail {

template <class T>
std::vector<Parameter<T>*> with_gradient(const std::vector<Parameter<T>*>& params) {
  std::vector<Parameter<T>*> out;
  for (auto* p : params)
    if (p->tensor.has_grad()) out.push_back(p);
  return out;
}

template <class T>
Tensor<T> normal_batch(std::size_t n, std::size_t dim, Rng& rng) {
  Buffer<T> v(n * dim);
  fill_normal<T>(v, rng);
  return Tensor<T>({n, dim}, std::move(v));
}

}  // namespace detail

/// D update on (real, fresh fakes) with G frozen; returns the D loss and
/// mean D(real) / D(fake).
template <class T, class Model>
std::tuple<double, double, double> discriminator_step(Model& model, OptimizerState<T>& d_opt, const Tensor<T>& real,
                                                      const Tensor<T>& z) {
  auto g = model.generator_parameters();
  auto d = model.discriminator_parameters();
  set_requires_grad(g, false);
  set_requires_grad(d, true);
  Tensor<T> fake = model.generate(z, real).detach();
  Tensor<T> real_logits = model.discriminate(real);
  Tensor<T> fake_logits = model.discriminate(fake);
  Tensor<T> loss = d_loss(real_logits, fake_logits);
  zero_grad(d);
  loss.backward();
  adam_step(d_opt, detail::with_gradient(d));
  set_requires_grad(g, true);
  return {static_cast<double>(loss.item()), mean_sigmoid(real_logits), mean_sigmoid(fake_logits)};
}

/// G update through a frozen D; returns the G loss before the update.
template <class T, class Model>
double generator_step(Model& model, OptimizerState<T>& g_opt, const Tensor<T>& real, const Tensor<T>& z,
                      GeneratorLoss kind = GeneratorLoss::kNonSaturating) {
  auto g = model.generator_parameters();
  auto d = model.discriminator_parameters();
  set_requires_grad(d, false);
  set_requires_grad(g, true);
  Tensor<T> logits = model.discriminate(model.generate(z, real));
  Tensor<T> loss = kind == GeneratorLoss::kSaturating ? g_loss_saturating(logits) : g_loss(logits);
  zero_grad(g);
  loss.backward();
  adam_step(g_opt, detail::with_gradient(g));
  set_requires_grad(d, true);
  return static_cast<double>(loss.item());
}

/// One D update followed by one G update, each on freshly drawn latents.
template <class T, class Model>
TrainLogRecord train_step(Model& model, OptimizerState<T>& g_opt, OptimizerState<T>& d_opt, const Tensor<T>& real,
                          std::size_t latent_dim, Rng& rng, GeneratorLoss kind = GeneratorLoss::kNonSaturating) {
  const std::size_t n = real.dim(0);
  TrainLogRecord rec;
  Tensor<T> z_d = detail::normal_batch<T>(n, latent_dim, rng);
  std::tie(rec.d_loss, rec.d_real_mean, rec.d_fake_mean) = discriminator_step(model, d_opt, real, z_d);
  Tensor<T> z_g = detail::normal_batch<T>(n, latent_dim, rng);
  rec.g_loss = generator_step(model, g_opt, real, z_g, kind);
  return rec;
}

// ---------------------------------------------------------------------------
// Model bundle

using Pyramid = std::vector<PyramidLevelModel<float>>;

/// Holds whichever architecture a run trains.
class GanModel {
 public:
  GanModel() = default;

  static GanModel build(const TrainConfig& c) {
    GanModel m;
    m.config_ = c;
    switch (c.architecture) {
      case Architecture::kDcgan:
        m.model_ = build_dcgan<float>(c.latent_dim, c.target_resolution, c.base_channels, c.seed);
        break;
      case Architecture::kPgan:
        m.model_ = build_progressive<float>(c.resolved_schedule(), c.latent_dim, c.base_channels, c.seed);
        break;
      case Architecture::kLapgan:
        m.model_ = build_lapgan<float>(c.levels(), c.latent_dim, c.target_resolution >> (c.levels() - 1), c.base_channels, c.seed);
        break;
    }
    return m;
  }

  const TrainConfig& config() const { return config_; }
  SequentialGan<float>& dcgan() { return std::get<SequentialGan<float>>(model_); }
  ProgressiveGan<float>& pgan() { return std::get<ProgressiveGan<float>>(model_); }
  Pyramid& pyramid() { return std::get<Pyramid>(model_); }
  const ProgressiveGan<float>& pgan() const { return std::get<ProgressiveGan<float>>(model_); }
  const Pyramid& pyramid() const { return std::get<Pyramid>(model_); }

  /// Current output resolution (PGAN grows; the others are fixed).
  std::size_t resolution() const {
    if (config_.architecture == Architecture::kPgan) return pgan().resolution();
    return config_.target_resolution;
  }

  std::vector<Parameter<float>*> generator_parameters() {
    return std::visit(
        [](auto& m) {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Pyramid>) {
            std::vector<Parameter<float>*> out;
            for (auto& level : m)
              for (auto* p : level.generator_parameters()) out.push_back(p);
            return out;
          } else {
            return m.generator_parameters();
          }
        },
        model_);
  }

  std::vector<Parameter<float>*> discriminator_parameters() {
    return std::visit(
        [](auto& m) {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Pyramid>) {
            std::vector<Parameter<float>*> out;
            for (auto& level : m)
              for (auto* p : level.discriminator_parameters()) out.push_back(p);
            return out;
          } else {
            return m.discriminator_parameters();
          }
        },
        model_);
  }

  std::vector<Parameter<float>*> all_parameters() {
    auto out = generator_parameters();
    for (auto* p : discriminator_parameters()) out.push_back(p);
    return out;
  }

  /// Images for a latent batch at the model's current resolution. The
  /// pyramid feeds the same latent to every level.
  Tensor<float> sample(const Tensor<float>& z) const {
    return std::visit(
        [&](const auto& m) -> Tensor<float> {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Pyramid>) {
            return lapgan_sample(m, std::vector<Tensor<float>>(m.size(), z));
          } else {
            return m.generate(z);
          }
        },
        model_);
  }

  /// Samples without recording a graph, upsampled to the target resolution.
  Tensor<float> sample_at_target(const Tensor<float>& z) {
    auto g = generator_parameters();
    set_requires_grad(g, false);
    Tensor<float> img = sample(z).detach();
    set_requires_grad(g, true);
    while (img.dim(2) < config_.target_resolution) img = upsample2x_nearest(img);
    return img;
  }

  std::string describe() const {
    return std::visit(
        [](const auto& m) {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Pyramid>) {
            std::string s;
            for (const auto& level : m) s += (s.empty() ? "" : "\n") + level.describe();
            return s;
          } else {
            return m.describe();
          }
        },
        model_);
  }

  /// Loads parameters saved at `ck`, growing a PGAN to the saved resolution
  /// and setting its fade to where training left it.
  void restore(const Checkpoint& ck) {
    if (config_.architecture == Architecture::kPgan) {
      const std::size_t res = std::stoull(ck.meta_at("resolution"));
      auto& gan = pgan();
      while (gan.resolution() < res) gan.grow(gan.resolution() * 2);
      const std::uint64_t it = std::stoull(ck.meta_at("iteration"));
      gan.set_alpha(it >= gan.schedule().total() ? 1.0 : alpha_at(gan.schedule(), it));
    }
    for (auto* p : all_parameters()) {
      auto v = ck.get<float>(p->name, p->tensor.shape());
      std::copy(v.begin(), v.end(), p->tensor.mutable_data().begin());
    }
  }

  static GanModel from_checkpoint(const Checkpoint& ck) {
    GanModel m = build(TrainConfig::from_json(nlohmann::json::parse(ck.meta_at("config"))));
    m.restore(ck);
    return m;
  }

 private:
  TrainConfig config_;
  std::variant<SequentialGan<float>, ProgressiveGan<float>, Pyramid> model_;
};

// ---------------------------------------------------------------------------
// Runs

inline std::string checkpoint_dir_name(std::uint64_t iteration) {
  std::ostringstream os;
  os << "iter-" << std::setw(7) << std::setfill('0') << iteration;
  return os.str();
}

class Trainer {
 public:
  using Progress = std::function<void(const TrainLogRecord&)>;

  Trainer(TrainConfig config, std::vector<ImageRecord> dataset)
      : config_(std::move(config)), dataset_(std::move(dataset)), sampler_(config_.seed, check_dataset()) {
    config_.validate();
    model_ = GanModel::build(config_);
    g_opt_ = OptimizerState<float>(config_.adam_config());
    d_opt_ = OptimizerState<float>(config_.adam_config());
    register_all();
  }

  const TrainConfig& config() const { return config_; }
  GanModel& model() { return model_; }
  std::uint64_t iteration() const { return iteration_; }
  std::uint64_t cursor() const { return sampler_.cursor(); }
  OptimizerState<float>& g_optimizer() { return g_opt_; }
  OptimizerState<float>& d_optimizer() { return d_opt_; }
  bool done() const { return iteration_ >= config_.total_iterations; }

  /// Runs iteration `iteration()` and advances.
  TrainLogRecord step() {
    if (done()) throw ArgumentError("training already finished");
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t it = iteration_;
    Rng rng = make_rng(config_.seed, {stream::kLatent, it});
    TrainLogRecord rec;
    switch (config_.architecture) {
      case Architecture::kDcgan: {
        Tensor<float> real = next_batch(config_.batch_size(config_.target_resolution), config_.target_resolution);
        rec = train_step(model_.dcgan(), g_opt_, d_opt_, real, config_.latent_dim, rng, config_.generator_loss);
        rec.resolution = config_.target_resolution;
        break;
      }
      case Architecture::kPgan: {
        auto& gan = model_.pgan();
        const auto& schedule = gan.schedule();
        const std::size_t res = it < schedule.total() ? schedule.resolution_at(it) : schedule.target_resolution();
        const double alpha = it < schedule.total() ? alpha_at(schedule, it) : 1.0;
        if (res > gan.resolution()) grow_to(res, it);
        gan.set_alpha(alpha);
        Tensor<float> real = next_batch(config_.batch_size(res), res);
        if (alpha < 1.0) real = fade_blend(upsample2x_nearest(downsample2x_avg(real)), real, alpha);
        rec = train_step(gan, g_opt_, d_opt_, real, config_.latent_dim, rng, config_.generator_loss);
        rec.resolution = res;
        rec.alpha = alpha;
        break;
      }
      case Architecture::kLapgan: {
        const std::size_t level = lapgan_level(it);
        auto& m = model_.pyramid()[level];
        if (level != last_level_) {
          event({{"event", "level_start"}, {"iteration", it}, {"level", level}, {"resolution", m.resolution}});
          last_level_ = level;
        }
        Tensor<float> real = next_batch(config_.batch_size(m.resolution), m.resolution);
        if (level > 0) real = pyramid_training_pair(real);
        rec = train_step(m, g_opt_, d_opt_, real, config_.latent_dim, rng, config_.generator_loss);
        rec.resolution = m.resolution;
        rec.level = level;
        break;
      }
    }
    rec.iteration = it;
    if (config_.record_wallclock)
      rec.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    ++iteration_;
    return rec;
  }

  /// First iteration of LAPGAN level `level`; levels split the run evenly,
  /// the remainder going to the finest level.
  std::uint64_t lapgan_level_start(std::size_t level) const { return level * (config_.total_iterations / config_.levels()); }

  std::size_t lapgan_level(std::uint64_t it) const {
    const std::uint64_t per = config_.total_iterations / config_.levels();
    return std::min<std::size_t>(static_cast<std::size_t>(it / per), config_.levels() - 1);
  }

  /// SWD between a fixed real subset and fixed-latent samples at the target
  /// resolution.
  SwdReport evaluate_swd() {
    const std::size_t n = std::min(config_.swd_images, dataset_.size());
    auto perm = epoch_permutation(derive_seed(config_.seed, {stream::kEval}), 0, dataset_.size());
    perm.resize(n);
    Tensor<float> real = stack_batch<float>(dataset_, perm);
    auto zs = sample_latents(derive_seed(config_.seed, {stream::kEval}), n, config_.latent_dim);
    std::vector<float> fake_values;
    fake_values.reserve(real.size());
    for (std::size_t i = 0; i < n; i += 64) {
      std::vector<LatentVector> chunk(zs.begin() + i, zs.begin() + std::min(n, i + 64));
      Tensor<float> img = model_.sample_at_target(latents_to_tensor<float>(chunk));
      fake_values.insert(fake_values.end(), img.data().begin(), img.data().end());
    }
    Tensor<float> fake(real.shape(), std::move(fake_values));
    SwdConfig sc = config_.swd;
    sc.seed = derive_seed(config_.seed, {stream::kSwd, sc.seed});
    return swd_report(real, fake, sc);
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.meta["iteration"] = std::to_string(iteration_);
    ck.meta["cursor"] = std::to_string(sampler_.cursor());
    ck.meta["architecture"] = to_string(config_.architecture);
    ck.meta["resolution"] = std::to_string(model_.resolution());
    ck.meta["config"] = config_.to_json().dump();
    ck.meta["opt.g.step"] = std::to_string(g_opt_.step());
    ck.meta["opt.d.step"] = std::to_string(d_opt_.step());
    std::istringstream arch(model_.describe());
    std::string line;
    for (int i = 0; std::getline(arch, line); ++i) {
      std::ostringstream key;
      key << "arch." << std::setw(3) << std::setfill('0') << i;
      ck.meta[key.str()] = line;
    }
    for (auto* p : model_.all_parameters()) ck.put(p->name, p->tensor);
    put_moments(ck, "opt.g.", g_opt_);
    put_moments(ck, "opt.d.", d_opt_);
    return ck;
  }

  void save_checkpoint(const std::filesystem::path& dir) { to_checkpoint().save(dir); }

  /// Rebuilds the run from a checkpoint; continuing produces the same
  /// records as an uninterrupted run.
  static Trainer from_checkpoint(const Checkpoint& ck, std::vector<ImageRecord> dataset) {
    TrainConfig config = TrainConfig::from_json(nlohmann::json::parse(ck.meta_at("config")));
    Trainer t(config, std::move(dataset));
    t.iteration_ = std::stoull(ck.meta_at("iteration"));
    t.sampler_ = BatchSampler(config.seed, t.dataset_.size(), std::stoull(ck.meta_at("cursor")));
    t.model_.restore(ck);
    t.register_all();
    if (config.architecture == Architecture::kLapgan && t.iteration_ > 0) t.last_level_ = t.lapgan_level(t.iteration_ - 1);
    get_moments(ck, "opt.g.", t.g_opt_);
    get_moments(ck, "opt.d.", t.d_opt_);
    t.g_opt_.set_step(std::stoull(ck.meta_at("opt.g.step")));
    t.d_opt_.set_step(std::stoull(ck.meta_at("opt.d.step")));
    return t;
  }

  static Trainer load_checkpoint(const std::filesystem::path& dir, std::vector<ImageRecord> dataset) {
    return from_checkpoint(Checkpoint::load(dir), std::move(dataset));
  }

  /// Trains to completion, writing log.jsonl, events.jsonl, swd_log.jsonl
  /// and checkpoints/iter-NNNNNNN under `out`. Existing logs are cut back to
  /// the current iteration first so a resumed run continues them.
  void run(const std::filesystem::path& out, const Progress& progress = {}) {
    std::filesystem::create_directories(out / "checkpoints");
    trim_jsonl(out / "log.jsonl", iteration_);
    trim_jsonl(out / "events.jsonl", iteration_);
    trim_jsonl(out / "swd_log.jsonl", iteration_);
    std::ofstream log(out / "log.jsonl", std::ios::app);
    events_.open(out / "events.jsonl", std::ios::app);
    std::ofstream swd(out / "swd_log.jsonl", std::ios::app);
    if (!log || !events_ || !swd) throw IoError("cannot open training logs under " + out.string());

    auto evaluate = [&] {
      nlohmann::json j = {{"iteration", iteration_}, {"resolution", model_.resolution()}, {"swd", evaluate_swd().to_json()}};
      swd << j.dump() << '\n' << std::flush;
    };
    if (iteration_ == 0) {
      event({{"event", "start"}, {"iteration", 0}, {"resolution", model_.resolution()}});
      evaluate();
    }
    while (!done()) {
      TrainLogRecord rec = step();
      if (rec.iteration % config_.log_every == 0 || done()) log << rec.to_json().dump() << '\n';
      if (progress) progress(rec);
      if (config_.swd_eval_every && iteration_ % config_.swd_eval_every == 0 && !done()) {
        log.flush();
        evaluate();
      }
      if (config_.checkpoint_every && iteration_ % config_.checkpoint_every == 0 && !done()) write_checkpoint(out);
    }
    log.flush();
    nlohmann::json j = {{"iteration", iteration_}, {"resolution", model_.resolution()}, {"swd", evaluate_swd().to_json()}};
    swd << j.dump() << '\n' << std::flush;
    write_checkpoint(out);
    event({{"event", "finish"}, {"iteration", iteration_}});
    events_.close();
  }

 private:
  std::size_t check_dataset() const {
    if (dataset_.empty()) throw ArgumentError("training dataset is empty");
    for (const auto& r : dataset_)
      if (r.pixels.rank() != 4 || r.pixels.dim(1) != 3 || r.pixels.dim(2) != config_.target_resolution ||
          r.pixels.dim(3) != config_.target_resolution)
        throw ShapeError("dataset image " + r.source + " is " + shape_string(r.pixels.shape()) + ", training expects 3x" +
                         std::to_string(config_.target_resolution) + "x" + std::to_string(config_.target_resolution));
    return dataset_.size();
  }

  void register_all() {
    g_opt_.register_parameters(model_.generator_parameters());
    d_opt_.register_parameters(model_.discriminator_parameters());
  }

  Tensor<float> next_batch(std::size_t batch, std::size_t resolution) {
    Tensor<float> real = stack_batch<float>(dataset_, sampler_.next(batch));
    return resize_to(real, resolution);
  }

  void grow_to(std::size_t res, std::uint64_t it) {
    auto& gan = model_.pgan();
    while (gan.resolution() < res) {
      gan.grow(gan.resolution() * 2);
      event({{"event", "grow"}, {"iteration", it}, {"resolution", gan.resolution()}});
    }
    register_all();
  }

  void event(const nlohmann::json& j) {
    if (events_.is_open()) events_ << j.dump() << '\n' << std::flush;
  }

  void write_checkpoint(const std::filesystem::path& out) {
    const auto name = checkpoint_dir_name(iteration_);
    save_checkpoint(out / "checkpoints" / name);
    const std::string latest = name + "\n";
    write_file_bytes(out / "checkpoints" / "latest", latest.data(), latest.size());
    event({{"event", "checkpoint"}, {"iteration", iteration_}, {"path", "checkpoints/" + name}});
  }

  static void put_moments(Checkpoint& ck, const std::string& prefix, const OptimizerState<float>& opt) {
    for (const auto& [name, m] : opt.moments()) {
      ck.meta[prefix + name + ".updates"] = std::to_string(m.updates);
      ck.put<float>(prefix + name + ".m", {m.first.size()}, m.first);
      ck.put<float>(prefix + name + ".v", {m.second.size()}, m.second);
    }
  }

  static void get_moments(const Checkpoint& ck, const std::string& prefix, OptimizerState<float>& opt) {
    for (auto& [name, m] : opt.moments()) {
      m.updates = std::stoull(ck.meta_at(prefix + name + ".updates"));
      m.first = ck.get<float>(prefix + name + ".m", {m.first.size()});
      m.second = ck.get<float>(prefix + name + ".v", {m.second.size()});
    }
  }

  /// Cuts a log back to what existed when the run stood at `iteration`:
  /// records of earlier steps, evaluations up to and including it, and
  /// events before it (plus the checkpoint written at it).
  static void trim_jsonl(const std::filesystem::path& path, std::uint64_t iteration) {
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line) && iteration > 0) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      const std::uint64_t it = j.value("iteration", std::uint64_t{0});
      bool keep = it < iteration;
      if (it == iteration) keep = j.contains("swd") || j.value("event", "") == "checkpoint" || j.value("event", "") == "start";
      if (keep) kept += line + "\n";
    }
    in.close();
    write_file_bytes(path, kept.data(), kept.size());
  }

  TrainConfig config_;
  std::vector<ImageRecord> dataset_;
  BatchSampler sampler_;
  GanModel model_;
  OptimizerState<float> g_opt_;
  OptimizerState<float> d_opt_;
  std::uint64_t iteration_ = 0;
  std::size_t last_level_ = static_cast<std::size_t>(-1);
  std::ofstream events_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, text.data(), text.size());
}

}  // namespace lesionforge
