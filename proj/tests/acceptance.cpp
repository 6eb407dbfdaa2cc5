// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance [--work DIR] [--train-iters N] [criterion ...]

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "lesionforge/lesionforge.hpp"
#include "lesionforge/cli.hpp"
#include "oracles.hpp"

using namespace lesionforge;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Options {
  fs::path work;
  std::uint64_t train_iters = 20000;
};

// ---------------------------------------------------------------------------

Verdict gradients(const Options&) {
  Clock clock;
  double worst = 0;
  std::string worst_op;
  std::size_t checks = 0, elements = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& [name, r] : lesionforge::oracle::check_every_op(seed)) {
      ++checks;
      elements += r.checked;
      if (r.max_rel_error >= worst) worst = r.max_rel_error, worst_op = name;
    }
  const double t = clock.seconds();
  return {worst < 1e-4 && t < 30.0,
          fmt("%zu op checks over 20 random shapes (%zu elements), worst rel err %.2e (%s), %.1f s", checks, elements, worst,
              worst_op.c_str(), t)};
}

Verdict laplacian(const Options&) {
  Rng rng = make_rng(2024);
  std::uniform_int_distribution<int> byte(0, 255), lv(1, 4), batch(1, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  double err64 = 0, err32 = 0, err64_raw = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t levels = lv(rng);
    const std::size_t res = std::size_t{1} << (levels + 1 + t % 3);
    const Shape shape = {static_cast<std::size_t>(batch(rng)), 3, res, res};
    std::vector<double> q(shape_numel(shape)), g(q.size());
    for (double& x : q) x = byte(rng) / 128.0 - 1.0;
    for (double& x : g) x = normal(rng);
    const Tensor<double> img(shape, q);
    const auto back = laplacian_reconstruct(laplacian_decompose(img, levels));
    for (std::size_t i = 0; i < q.size(); ++i) err64 = std::max(err64, std::abs(back[i] - q[i]));
    const Tensor<double> raw(shape, g);
    const auto back_raw = laplacian_reconstruct(laplacian_decompose(raw, levels));
    for (std::size_t i = 0; i < g.size(); ++i) err64_raw = std::max(err64_raw, std::abs(back_raw[i] - g[i]));
    const Tensor<float> f(shape, std::vector<float>(g.begin(), g.end()));
    const auto back32 = laplacian_reconstruct(laplacian_decompose(f, levels));
    for (std::size_t i = 0; i < g.size(); ++i) err32 = std::max(err32, static_cast<double>(std::abs(back32[i] - f[i])));
  }
  return {err64 == 0.0 && err32 <= 1e-5,
          fmt("100 images, 1-4 levels: 64-bit max err %.1e on 8-bit images (%.1e on unquantized normals), 32-bit %.1e", err64,
              err64_raw, err32)};
}

Verdict progressive_continuity(const Options&) {
  auto gan = build_progressive<float>(ProgressiveSchedule::uniform(4, 32, 10, 10), 128, 32, 5);
  Rng rng = make_rng(77);
  std::vector<float> z(10 * 128);
  fill_normal<float>(z, rng);
  const Tensor<float> latents({10, 128}, z);
  double worst = 0;
  for (std::size_t r : {8u, 16u, 32u}) {
    const auto before = upsample2x_nearest(gan.generate(latents)).detach();
    gan.grow(r);
    gan.set_alpha(0.0);
    const auto after = gan.generate(latents).detach();
    if (after.shape() != before.shape()) return {false, "shape changed across growth"};
    for (std::size_t i = 0; i < after.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(after[i] - before[i])));
    gan.set_alpha(1.0);
  }
  return {worst <= 1e-5, fmt("10 latents, growth 4->8->16->32 at alpha=0: max |grown - upsampled| = %.2e", worst)};
}

double exhaustive_w1(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[perm[i]]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.size());
}

Tensor<float> blob_tensor(std::uint64_t seed, std::size_t first, std::size_t count, std::size_t res) {
  const auto recs = synth_blob_dataset(seed, first + count, res);
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return stack_batch<float>(recs, idx);
}

Verdict swd(const Options&) {
  SwdConfig cfg;
  cfg.seed = 8;
  const auto real = blob_tensor(21, 0, 256, 16), other = blob_tensor(21, 256, 256, 16);
  const auto self = swd_report(real, real, cfg);

  Rng rng = make_rng(99);
  std::uniform_int_distribution<std::size_t> len(1, 6);
  std::uniform_int_distribution<int> val(-20, 20);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = len(rng);
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = val(rng) / 4.0;
    for (auto& x : b) x = val(rng) / 4.0;
    if (w1_sorted(a, b) != exhaustive_w1(a, b)) ++mismatches;
  }

  Rng noise_rng = make_rng(4);
  std::vector<float> noise(real.size());
  fill_uniform<float>(noise, noise_rng, -1.f, 1.f);
  const Tensor<float> uniform(real.shape(), noise);
  auto gan = build_progressive<float>(ProgressiveSchedule::uniform(4, 16, 1, 1), 128, 64, 1);
  std::vector<float> z(256 * 128);
  fill_normal<float>(z, noise_rng);
  const auto untrained = upsample2x_nearest(upsample2x_nearest(gan.generate(Tensor<float>({256, 128}, z)))).detach();
  const double lower = swd_report(real, other, cfg).average * 1e3;
  const double model = swd_report(real, untrained, cfg).average * 1e3;
  const double random = swd_report(real, uniform, cfg).average * 1e3;
  return {self.average == 0.0 && mismatches == 0 && lower < model && model < random,
          fmt("SWD(X,X)=%g; sorted vs exhaustive 1-D matching: %d/1000 mismatches; real-half %.1f < untrained %.1f < noise %.1f",
              self.average, mismatches, lower, model, random)};
}

struct TrainOutcome {
  double initial = 0, final = 0, seconds = 0;
  bool ok = false;
  std::string error;
};

TrainOutcome train_run(const Options& o, const std::string& arch) {
  const fs::path out = o.work / ("train-" + arch);
  fs::remove_all(out);
  std::ostringstream sout, serr;
  Clock clock;
  const int code = cli::run_cli({"train", "--arch", arch, "--synth", "2000", "--target-res", "16", "--iters", std::to_string(o.train_iters),
                                 "--swd-every", std::to_string(o.train_iters / 4), "--checkpoint-every", "0", "--seed", "1", "--out",
                                 out.string()},
                                sout, serr);
  TrainOutcome t;
  t.seconds = clock.seconds();
  if (code != 0) {
    t.error = serr.str();
    return t;
  }
  const json s = json::parse(sout.str());
  t.initial = s["initial_swd"];
  t.final = s["final_swd"];
  t.ok = true;
  return t;
}

Verdict desk_training(const Options& o) {
  const TrainOutcome p = train_run(o, "pgan");
  if (!p.ok) return {false, "pgan run failed: " + p.error};
  const TrainOutcome d = train_run(o, "dcgan");
  if (!d.ok) return {false, "dcgan run failed: " + d.error};
  const bool hard = p.final <= 0.5 * p.initial && d.final <= 0.5 * d.initial && p.seconds <= 900 && d.seconds <= 900;
  return {hard, fmt("16x16, 2000 blobs, %llu iters, seed 1: pgan SWD %.1f -> %.1f (x%.2f, %.0f s); dcgan %.1f -> %.1f (x%.2f, %.0f s); "
                    "pgan <= dcgan: %s (soft)",
                    static_cast<unsigned long long>(o.train_iters), p.initial, p.final, p.final / p.initial, p.seconds, d.initial,
                    d.final, d.final / d.initial, d.seconds, p.final <= d.final ? "yes" : "no")};
}

Verdict published_rater_metrics(const Options&) {
  double worst = 0;
  std::string where;
  int compared = 0;
  for (const auto& c : ::oracle::voter_columns()) {
    const RaterMetrics m = rater_metrics(ConfusionMatrix{c.tp, c.fp, c.fn, c.tn});
    using Row = std::tuple<Rate, double, const char*>;
    for (const auto& [got, printed, what] : {Row{m.accuracy, c.acc, "acc"}, Row{m.tpr, c.tpr, "tpr"}, Row{m.tnr, c.tnr, "tnr"}}) {
      const double diff = std::abs(static_cast<double>(*got.thousandths()) / 1000.0 - printed);
      ++compared;
      if (diff >= worst) worst = diff, where = std::string(c.name) + " " + what;
    }
  }
  return {compared == 24 && worst <= 0.0005, fmt("%d printed values, worst |diff| %.4f (%s)", compared, worst, where.c_str())};
}

RatingsTable table_from_labels(const std::vector<std::vector<int>>& labels, int categories) {
  RatingsTable t;
  for (const auto& item : labels) {
    std::vector<std::uint64_t> row(categories, 0);
    for (int l : item) ++row[l];
    t.counts.push_back(row);
  }
  return t;
}

Verdict fleiss(const Options&) {
  const bool hand = fleiss_kappa({{{2, 0}, {0, 2}}}).kappa == 1.0 && fleiss_kappa({{{0, 2}, {1, 1}, {2, 0}}}).kappa == 1.0 / 3.0 &&
                    fleiss_kappa({{{1, 1}, {1, 1}, {1, 1}}}).kappa == -1.0;
  Rng rng = make_rng(21);
  double worst = 0;
  int compared = 0;
  while (compared < 100) {
    const std::size_t items = 1 + rng() % 80, raters = 2 + rng() % 7;
    const int cats = 2 + static_cast<int>(rng() % 3);
    std::vector<std::vector<int>> labels(items, std::vector<int>(raters));
    for (auto& item : labels)
      for (int& l : item) l = static_cast<int>(rng() % cats);
    const auto r = fleiss_kappa(table_from_labels(labels, cats));
    if (!r.kappa) continue;
    worst = std::max(worst, std::abs(*r.kappa - ::oracle::fleiss_kappa_pairs(labels, cats)));
    ++compared;
  }
  return {hand && worst <= 1e-12, fmt("hand cases 1, 1/3, -1 %s; %d random tables vs pair-count oracle, max |diff| %.1e",
                                      hand ? "exact" : "WRONG", compared, worst)};
}

Verdict vtt_service(const Options& o) {
  const fs::path dir = o.work / "vtt";
  fs::remove_all(dir);
  std::vector<fs::path> real, fake;
  for (std::size_t i = 0; i < 60; ++i) {
    real.push_back(dir / "src" / "real" / cli::format_index("r", i, ".png"));
    write_png(real.back(), synth_blob_image(31, i, 32).image);
  }
  for (std::size_t i = 0; i < 40; ++i) {
    fake.push_back(dir / "src" / "fake" / cli::format_index("f", i, ".png"));
    write_png(fake.back(), synth_blob_image(32, i, 16).image);
  }

  vtt::StudyStore store(dir / "studies");
  vtt::VttServer server(store, {"operator-token", {}});
  const int port = server.bind("127.0.0.1");
  std::thread thread([&] { server.listen(); });
  server.wait_until_ready();
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  const httplib::Headers op = {{"Authorization", "Bearer operator-token"}};
  httplib::Client c("127.0.0.1", port);

  json paths_real = json::array(), paths_fake = json::array();
  for (const auto& p : real) paths_real.push_back(p.string());
  for (const auto& p : fake) paths_fake.push_back(p.string());
  auto created = c.Post("/studies", op, json{{"real", paths_real}, {"fake", paths_fake}, {"seed", 12}}.dump(), "application/json");
  if (!created || created->status != 201) {
    server.stop();
    thread.join();
    return {false, "study creation failed"};
  }
  const std::string sid = json::parse(created->body)["study"];
  std::size_t n_real = 0, n_fake = 0;
  for (const auto& item : store.state(sid).items) (store.truth(sid, item) == vtt::kReal ? n_real : n_fake)++;
  check(n_real == 50 && n_fake == 30, fmt("study has %zu real + %zu fake", n_real, n_fake));

  // synthetic raters: each calls an item real with a fixed probability per truth class
  struct Rater {
    std::string role;
    double p_real_given_real, p_real_given_fake;
  };
  const std::vector<Rater> raters = {{"DLE", 0.8, 0.3}, {"DLE", 0.7, 0.4}, {"DLE", 0.9, 0.6}, {"ED", 0.6, 0.5}, {"ED", 0.5, 0.5}};
  Rng rng = make_rng(42);
  std::map<std::string, ConfusionMatrix> expected;
  std::size_t revisions = 0;
  for (const auto& r : raters) {
    auto enrolled = c.Post("/studies/" + sid + "/participants", op, json{{"role", r.role}}.dump(), "application/json");
    const std::string pid = json::parse(enrolled->body)["participant"];
    const std::string base = "/studies/" + sid + "/participants/" + pid;
    const json view = json::parse(c.Get(base + "/items")->body);
    ConfusionMatrix& cm = expected[pid];
    for (const auto& it : view["items"]) {
      const std::string item = it["id"];
      const bool truth_real = store.truth(sid, item) == vtt::kReal;
      std::bernoulli_distribution says_real(truth_real ? r.p_real_given_real : r.p_real_given_fake);
      int label = says_real(rng) ? 1 : 0;
      if (rng() % 10 == 0) {  // change of mind: last write wins
        c.Put(base + "/responses/" + item, json{{"label", 1 - label}}.dump(), "application/json");
        ++revisions;
      }
      auto put = c.Put(base + "/responses/" + item, json{{"label", label}}.dump(), "application/json");
      check(put && put->status == 200, "response rejected");
      if (truth_real) (label ? cm.tp : cm.fn)++;
      else (label ? cm.fp : cm.tn)++;
    }
    check(c.Post(base + "/complete", "", "application/json")->status == 200, "completion rejected");
  }

  // log replay reproduces the live state
  check(vtt::replay(vtt::read_text(store.log_path(sid))) == store.state(sid), "log replay differs from live state");
  check(vtt::StudyStore(dir / "studies").state(sid) == store.state(sid), "reopened store differs");

  auto exported = c.Get("/studies/" + sid + "/export", op);
  server.stop();
  thread.join();
  if (!exported || exported->status != 200) return {false, "export failed"};

  std::size_t revised_rows = 0;
  for (const auto& row : store.export_results(sid)) revised_rows += row.revisions > 0;
  check(revised_rows == revisions, fmt("%zu revised rows, expected %zu", revised_rows, revisions));

  const RaterReport report = rater_report(parse_ratings(exported->body));
  check(report.raters.size() == raters.size(), "report rater count");
  for (const auto& s : report.raters) check(s.cm == expected[s.participant], "confusion matrix differs for " + s.participant);
  const bool kappa_present = report.kappa.cells.count("DLE") && report.kappa.cells.count("All");

  std::string detail = fmt("50 real + 30 fake items; %zu synthetic raters over HTTP with %zu revisions; replay == live; report: %zu raters, "
                           "all-rater kappa %s",
                           raters.size(), revisions, report.raters.size(),
                           kappa_present && report.kappa.cells.at("All").at("all").result.kappa
                               ? fmt("%.3f", *report.kappa.cells.at("All").at("all").result.kappa).c_str()
                               : "n/a");
  check(kappa_present, "kappa groups missing");
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

// Files under `a` and `b` that differ, or exist on one side only.
std::vector<std::string> tree_diff(const fs::path& a, const fs::path& b) {
  std::map<std::string, std::string> fa, fb;
  auto collect = [](const fs::path& root, std::map<std::string, std::string>& out) {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = cli::read_text_file(e.path());
  };
  collect(a, fa);
  collect(b, fb);
  std::vector<std::string> diff;
  for (const auto& [k, v] : fa)
    if (!fb.count(k) || fb[k] != v) diff.push_back(k);
  for (const auto& [k, v] : fb)
    if (!fa.count(k)) diff.push_back(k);
  return diff;
}

Verdict determinism(const Options& o) {
  const fs::path dir = o.work / "determinism";
  fs::remove_all(dir);
  auto run = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    if (code != 0) throw std::runtime_error(args[0] + " failed: " + err.str());
    return out.str();
  };
  auto s = [&](const fs::path& p) { return p.string(); };
  std::vector<std::string> failures;
  std::size_t files = 0, runs = 0;
  // each first run writes a manifest; replaying it elsewhere must give the same bytes
  auto replay = [&](const fs::path& first_dir, const fs::path& manifest_dir, const fs::path& replay_out, const fs::path& replay_dir) {
    run({"--config", s(manifest_dir / "manifest.json"), "--out", s(replay_out)});
    ++runs;
    for (const auto& f : tree_diff(first_dir, replay_dir)) failures.push_back(s(fs::relative(first_dir, dir)) + "/" + f);
    for (const auto& e : fs::recursive_directory_iterator(first_dir)) files += e.is_regular_file();
  };

  run({"synth-data", "--count", "120", "--resolution", "16", "--seed", "3", "--out", s(dir / "blobs")});
  replay(dir / "blobs", dir / "blobs", dir / "blobs.replay", dir / "blobs.replay");
  run({"prepare-data", "--input", s(dir / "blobs"), "--resolution", "16", "--out", s(dir / "prep")});
  replay(dir / "prep", dir / "prep", dir / "prep.replay", dir / "prep.replay");
  for (const std::string arch : {"pgan", "dcgan", "lapgan"}) {
    const auto out = dir / ("train-" + arch);
    run({"train", "--arch", arch, "--data", s(dir / "prep"), "--iters", "60", "--swd-every", "30", "--swd-images", "64",
         "--checkpoint-every", "30", "--seed", "5", "--out", s(out)});
    replay(out, out, dir / ("train-" + arch + ".replay"), dir / ("train-" + arch + ".replay"));
  }
  run({"generate", "--checkpoint", s(dir / "train-pgan"), "--count", "40", "--seed", "8", "--out", s(dir / "gen")});
  replay(dir / "gen", dir / "gen", dir / "gen.replay", dir / "gen.replay");
  run({"walk", "--checkpoint", s(dir / "train-dcgan"), "--steps", "5", "--seed", "2", "--out", s(dir / "walk")});
  replay(dir / "walk", dir / "walk", dir / "walk.replay", dir / "walk.replay");
  run({"swd", "--a", s(dir / "blobs"), "--b", s(dir / "gen" / "samples"), "--seed", "4", "--out", s(dir / "swd")});
  replay(dir / "swd", dir / "swd", dir / "swd.replay", dir / "swd.replay");

  const json created = json::parse(run({"study", "create", "--real", s(dir / "blobs"), "--fake", s(dir / "gen" / "samples"), "--n-fake", "30",
                                        "--seed", "6", "--out", s(dir / "studies")}));
  const std::string sid = created["study"];
  replay(dir / "studies" / sid, dir / "studies" / sid, dir / "studies.replay", dir / "studies.replay" / sid);
  {
    vtt::StudyStore store(dir / "studies");
    Rng rng = make_rng(9);
    for (const char* role : {"DLE", "DLE", "ED"}) {
      const auto p = store.enroll(sid, role);
      for (const auto& item : p.order) store.record_response(sid, p.id, item, static_cast<int>(rng() % 2));
      store.complete(sid, p.id);
    }
  }
  run({"study", "export", "--root", s(dir / "studies"), "--study", sid, "--out", s(dir / "export")});
  replay(dir / "export", dir / "export", dir / "export.replay", dir / "export.replay");
  run({"study", "analyze", "--ratings", s(dir / "export" / "export.jsonl"), "--out", s(dir / "report")});
  replay(dir / "report", dir / "report", dir / "report.replay", dir / "report.replay");

  std::string detail = fmt("%zu manifests replayed (data, prepare, train x3, generate, walk, swd, study create/export/analyze), %zu files compared",
                           runs, files);
  if (!failures.empty()) {
    detail += "; differing:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  o.work = fs::temp_directory_path() / ("lf_acceptance_" + std::to_string(::getpid()));
  bool keep = false;
  std::vector<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      o.work = argv[++i];
      keep = true;
    } else if (a == "--train-iters" && i + 1 < argc) {
      o.train_iters = std::stoull(argv[++i]);
    } else {
      only.push_back(a);
    }
  }
  fs::create_directories(o.work);

  const std::vector<std::pair<std::string, std::function<Verdict(const Options&)>>> criteria = {
      {"gradients", gradients},
      {"laplacian", laplacian},
      {"progressive-continuity", progressive_continuity},
      {"swd", swd},
      {"desk-training", desk_training},
      {"published-rater-metrics", published_rater_metrics},
      {"fleiss-kappa", fleiss},
      {"vtt-service", vtt_service},
      {"determinism", determinism},
  };
  int failed = 0, ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    ++ran;
    Verdict v;
    try {
      v = fn(o);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << std::endl;
  }
  if (!keep) fs::remove_all(o.work);
  if (ran == 0) {
    std::cerr << "no criterion matched\n";
    return 2;
  }
  return failed ? 1 : 0;
}
