#pragma once

// Visual Turing test studies. Everything a study knows lives in its
// directory:
//
//   <root>/<study>/log.jsonl     append-only event log, one object per line
//   <root>/<study>/truth.json    item -> real|fake, never served
//   <root>/<study>/images/*.png  blinded, re-encoded assets
//
// The in-memory state is a fold over the log and is rebuilt from it on open.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/data.hpp"
#include "lesionforge/image_io.hpp"
#include "lesionforge/random.hpp"

namespace lesionforge::vtt {

using nlohmann::json;

struct NotFoundError : Error {
  using Error::Error;
};
struct ConflictError : Error {
  using Error::Error;
};

// label and truth share one encoding
inline constexpr int kReal = 1;
inline constexpr int kFake = 0;

inline std::string truth_name(int t) { return t == kReal ? "real" : "fake"; }

inline std::string hex_id(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

struct StudyConfig {
  std::size_t n_real = 50;
  std::size_t n_fake = 30;
  std::uint64_t seed = 0;
  std::size_t resolution = 0;  // 0: the fakes' own size

  json to_json() const { return {{"n_real", n_real}, {"n_fake", n_fake}, {"seed", seed}, {"resolution", resolution}}; }

  static StudyConfig from_json(const json& j) {
    StudyConfig c;
    c.n_real = j.value("n_real", c.n_real);
    c.n_fake = j.value("n_fake", c.n_fake);
    c.seed = j.value("seed", c.seed);
    c.resolution = j.value("resolution", c.resolution);
    if (c.n_real + c.n_fake == 0) throw ArgumentError("a study needs at least one item");
    return c;
  }

  bool operator==(const StudyConfig&) const = default;
};

struct Participant {
  std::string id;
  std::string role;
  std::size_t index = 0;  // enrollment position
  std::vector<std::string> order;
  bool complete = false;
  std::string completed_at;

  bool operator==(const Participant&) const = default;
};

struct Response {
  std::string participant;
  std::string item;
  int label = 0;
  std::uint64_t revision = 0;
  std::string first_at;
  std::string at;

  bool operator==(const Response&) const = default;
};

/// Current view of one study, derived from its log.
struct StudyState {
  std::string id;
  std::string created;
  StudyConfig config;
  std::vector<std::string> items;
  std::vector<std::string> enrollment;  // participant ids in enrollment order
  std::map<std::string, Participant> participants;
  std::map<std::pair<std::string, std::string>, Response> current;
  std::uint64_t next_seq = 0;

  bool operator==(const StudyState&) const = default;

  bool has_item(const std::string& item) const { return std::find(items.begin(), items.end(), item) != items.end(); }

  const Participant& participant(const std::string& pid) const {
    auto it = participants.find(pid);
    if (it == participants.end()) throw NotFoundError("unknown participant " + pid);
    return it->second;
  }

  const Response* response(const std::string& pid, const std::string& item) const {
    auto it = current.find({pid, item});
    return it == current.end() ? nullptr : &it->second;
  }

  std::size_t answered(const std::string& pid) const {
    std::size_t n = 0;
    for (const auto& item : items) n += current.count({pid, item});
    return n;
  }

  /// Folds one log record into the state; rejects anything out of sequence
  /// or inconsistent with what came before.
  void apply(const json& r) {
    const std::uint64_t seq = r.at("seq").get<std::uint64_t>();
    if (seq != next_seq) throw IoError("study log out of sequence: expected " + std::to_string(next_seq) + ", got " + std::to_string(seq));
    const std::string type = r.at("type").get<std::string>();
    if ((seq == 0) != (type == "create")) throw IoError("study log must start with exactly one create record");
    if (type == "create") {
      id = r.at("study").get<std::string>();
      created = r.at("created").get<std::string>();
      config = StudyConfig::from_json(r.at("config"));
      items = r.at("items").get<std::vector<std::string>>();
    } else if (type == "enroll") {
      Participant p;
      p.id = r.at("participant").get<std::string>();
      p.role = r.at("role").get<std::string>();
      p.index = r.at("index").get<std::size_t>();
      p.order = r.at("order").get<std::vector<std::string>>();
      if (p.index != enrollment.size() || participants.count(p.id)) throw IoError("study log: bad enrollment of " + p.id);
      enrollment.push_back(p.id);
      participants[p.id] = std::move(p);
    } else if (type == "response") {
      const std::string pid = r.at("participant").get<std::string>(), item = r.at("item").get<std::string>();
      if (!participants.count(pid) || !has_item(item)) throw IoError("study log: response for unknown participant or item");
      const std::uint64_t revision = r.at("revision").get<std::uint64_t>();
      auto it = current.find({pid, item});
      const std::uint64_t expected = it == current.end() ? 0 : it->second.revision + 1;
      if (revision != expected) throw IoError("study log: revision counter skips for " + pid + "/" + item);
      Response resp{pid, item, r.at("label").get<int>(), revision, it == current.end() ? r.at("at").get<std::string>() : it->second.first_at,
                    r.at("at").get<std::string>()};
      current[{pid, item}] = std::move(resp);
    } else if (type == "complete") {
      auto& p = participants.at(r.at("participant").get<std::string>());
      p.complete = true;
      p.completed_at = r.at("at").get<std::string>();
    } else {
      throw IoError("study log: unknown record type " + type);
    }
    ++next_seq;
  }
};

/// Replays log text. A trailing line without a newline is an interrupted
/// append and is ignored.
inline StudyState replay(const std::string& text) {
  StudyState s;
  std::size_t pos = 0;
  while (true) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    if (nl > pos) s.apply(json::parse(text.substr(pos, nl - pos)));
    pos = nl + 1;
  }
  return s;
}

inline std::string read_text(const std::filesystem::path& p) {
  auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

/// Permutation of the study items for the participant enrolled at `index`.
inline std::vector<std::string> presentation_order(const std::vector<std::string>& items, std::uint64_t seed, std::size_t index) {
  std::vector<std::string> order = items;
  Rng rng = make_rng(seed, {stream::kStudy, 5, index});
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

struct ExportRow {
  std::string participant;
  std::string role;
  std::string item;
  int truth = 0;
  int label = 0;
  std::uint64_t revisions = 0;
  std::string first_at;
  std::string last_at;
  bool complete = false;

  json to_json() const {
    return {{"participant", participant}, {"role", role},         {"item", item},       {"truth", truth},     {"label", label},
            {"revisions", revisions},     {"first_at", first_at}, {"last_at", last_at}, {"complete", complete}};
  }
};

inline std::string export_jsonl(const std::vector<ExportRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.to_json().dump() + "\n";
  return out;
}

inline std::string export_csv(const std::vector<ExportRow>& rows) {
  std::ostringstream os;
  os << "participant,role,item,truth,label,revisions,complete\n";
  for (const auto& r : rows) {
    if (r.role.find_first_of(",\"\n") != std::string::npos) throw ArgumentError("role '" + r.role + "' cannot be written as CSV");
    os << r.participant << ',' << r.role << ',' << r.item << ',' << r.truth << ',' << r.label << ',' << r.revisions << ','
       << (r.complete ? 1 : 0) << '\n';
  }
  return os.str();
}

/// All studies under one root directory. Every mutation appends to the
/// study's log under a single lock before the in-memory view changes.
class StudyStore {
 public:
  using Clock = std::function<std::string()>;

  explicit StudyStore(std::filesystem::path root, Clock clock = utc_now) : root_(std::move(root)), clock_(std::move(clock)) {
    std::filesystem::create_directories(root_);
    for (const auto& e : std::filesystem::directory_iterator(root_))
      if (e.is_directory() && std::filesystem::exists(e.path() / "log.jsonl")) open(e.path());
  }

  const std::filesystem::path& root() const { return root_; }

  /// Picks n_real and n_fake sources at random, blinds and re-encodes them.
  StudyState create_study(std::vector<std::filesystem::path> real, std::vector<std::filesystem::path> fake, const StudyConfig& config,
                          std::optional<std::string> created = std::nullopt) {
    if (real.size() < config.n_real || fake.size() < config.n_fake) {
      std::ostringstream msg;
      msg << "not enough images for the study:";
      if (real.size() < config.n_real) msg << " need " << config.n_real << " real, have " << real.size() << " (short " << config.n_real - real.size() << ")";
      if (fake.size() < config.n_fake) msg << " need " << config.n_fake << " fake, have " << fake.size() << " (short " << config.n_fake - fake.size() << ")";
      throw ArgumentError(msg.str());
    }
    std::sort(real.begin(), real.end());
    std::sort(fake.begin(), fake.end());
    pick(real, config.n_real, make_rng(config.seed, {stream::kStudy, 1, 0}));
    pick(fake, config.n_fake, make_rng(config.seed, {stream::kStudy, 1, 1}));

    struct Source {
      std::filesystem::path path;
      int truth;
    };
    std::vector<Source> sources;
    for (const auto& p : real) sources.push_back({p, kReal});
    for (const auto& p : fake) sources.push_back({p, kFake});
    Rng mix = make_rng(config.seed, {stream::kStudy, 2});
    for (std::size_t i = sources.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> k(0, i - 1);
      std::swap(sources[i - 1], sources[k(mix)]);
    }

    std::vector<RgbImage> images;
    for (const auto& s : sources) images.push_back(read_image(s.path));
    const std::size_t res = config.resolution ? config.resolution : common_fake_size(sources, images);

    std::lock_guard lock(mutex_);
    const std::string id = hex_id(derive_seed(config.seed, {stream::kStudy, 0}));
    const auto dir = root_ / id;
    if (studies_.count(id) || std::filesystem::exists(dir)) throw ConflictError("study " + id + " already exists");

    json truth = json::object();
    std::vector<std::string> item_ids;
    std::set<std::string> seen;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      std::string item = hex_id(derive_seed(config.seed, {stream::kStudy, 3, k}));
      if (!seen.insert(item).second) throw Error("item id collision");
      const RgbImage blinded = blind(images[k], res, sources[k].path.string());
      const auto png = encode_png(blinded);
      write_file_bytes(dir / "images" / (item + ".png"), png.data(), png.size());
      truth[item] = {{"truth", truth_name(sources[k].truth)}, {"source", sources[k].path.string()}};
      item_ids.push_back(std::move(item));
    }
    const std::string t = json({{"study", id}, {"items", truth}}).dump(1);
    write_file_bytes(dir / "truth.json", t.data(), t.size());

    Entry& e = studies_[id];
    e.dir = dir;
    for (auto& [item, v] : truth.items()) {
      e.truth[item] = v.at("truth") == "real" ? kReal : kFake;
      item_study_[item] = id;
    }
    append(e, {{"type", "create"}, {"study", id}, {"created", created ? *created : clock_()}, {"config", config.to_json()}, {"items", item_ids}});
    return e.state;
  }

  Participant enroll(const std::string& study, const std::string& role) {
    if (role.empty()) throw ArgumentError("participant role must not be empty");
    std::lock_guard lock(mutex_);
    Entry& e = entry(study);
    const std::size_t index = e.state.enrollment.size();
    const std::string pid = hex_id(derive_seed(e.state.config.seed, {stream::kStudy, 4, index}));
    append(e, {{"type", "enroll"},
               {"participant", pid},
               {"role", role},
               {"index", index},
               {"order", presentation_order(e.state.items, e.state.config.seed, index)}});
    return e.state.participants.at(pid);
  }

  Response record_response(const std::string& study, const std::string& pid, const std::string& item, int label) {
    if (label != kReal && label != kFake) throw ArgumentError("label must be 0 (fake) or 1 (real), got " + std::to_string(label));
    std::lock_guard lock(mutex_);
    Entry& e = entry(study);
    const Participant& p = e.state.participant(pid);
    if (!e.state.has_item(item)) throw NotFoundError("item " + item + " is not part of study " + study);
    if (p.complete) throw ConflictError("participant " + pid + " has already completed the study");
    const Response* prev = e.state.response(pid, item);
    append(e, {{"type", "response"}, {"participant", pid}, {"item", item}, {"label", label}, {"revision", prev ? prev->revision + 1 : 0},
               {"at", clock_()}});
    return *e.state.response(pid, item);
  }

  /// Marks the participant finished; every item must have an answer.
  Participant complete(const std::string& study, const std::string& pid) {
    std::lock_guard lock(mutex_);
    Entry& e = entry(study);
    const Participant& p = e.state.participant(pid);
    if (p.complete) return p;
    const std::size_t missing = e.state.items.size() - e.state.answered(pid);
    if (missing) throw ConflictError(std::to_string(missing) + " item(s) still unanswered");
    append(e, {{"type", "complete"}, {"participant", pid}, {"at", clock_()}});
    return e.state.participants.at(pid);
  }

  StudyState state(const std::string& study) const {
    std::lock_guard lock(mutex_);
    return entry(study).state;
  }

  std::vector<std::string> study_ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, e] : studies_) ids.push_back(id);
    return ids;
  }

  std::filesystem::path log_path(const std::string& study) const {
    std::lock_guard lock(mutex_);
    return entry(study).dir / "log.jsonl";
  }

  /// Blinded PNG bytes for an item of any study.
  std::vector<std::uint8_t> image(const std::string& item) const {
    std::lock_guard lock(mutex_);
    auto it = item_study_.find(item);
    if (it == item_study_.end()) throw NotFoundError("unknown item " + item);
    return read_file_bytes(entry(it->second).dir / "images" / (item + ".png"));
  }

  /// Truth for an item; operator-only.
  int truth(const std::string& study, const std::string& item) const {
    std::lock_guard lock(mutex_);
    const Entry& e = entry(study);
    auto it = e.truth.find(item);
    if (it == e.truth.end()) throw NotFoundError("unknown item " + item);
    return it->second;
  }

  /// One row per answered (participant, item), participants in enrollment
  /// order and items in their presentation order.
  std::vector<ExportRow> export_results(const std::string& study) const {
    std::lock_guard lock(mutex_);
    const Entry& e = entry(study);
    std::vector<ExportRow> rows;
    for (const auto& pid : e.state.enrollment) {
      const Participant& p = e.state.participants.at(pid);
      for (const auto& item : p.order) {
        const Response* r = e.state.response(pid, item);
        if (!r) continue;
        rows.push_back({pid, p.role, item, e.truth.at(item), r->label, r->revision, r->first_at, r->at, p.complete});
      }
    }
    return rows;
  }

 private:
  struct Entry {
    std::filesystem::path dir;
    StudyState state;
    std::map<std::string, int> truth;
  };

  static void pick(std::vector<std::filesystem::path>& paths, std::size_t n, Rng rng) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> k(i, paths.size() - 1);
      std::swap(paths[i], paths[k(rng)]);
    }
    paths.resize(n);
  }

  template <class Sources>
  static std::size_t common_fake_size(const Sources& sources, const std::vector<RgbImage>& images) {
    std::size_t res = 0;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      if (sources[k].truth != kFake) continue;
      const RgbImage& im = images[k];
      if (im.height != im.width) throw ShapeError("generated image " + sources[k].path.string() + " is not square");
      if (res && im.height != res) throw ShapeError("generated images differ in size; set a study resolution");
      res = im.height;
    }
    if (!res) throw ArgumentError("a study without fakes needs an explicit resolution");
    return res;
  }

  // Same size for every item, so resolution cannot give the origin away.
  static RgbImage blind(const RgbImage& image, std::size_t res, const std::string& source) {
    if (image.height == res && image.width == res) return image;
    return denormalize(preprocess(image, res, source).pixels);
  }

  Entry& entry(const std::string& study) {
    auto it = studies_.find(study);
    if (it == studies_.end()) throw NotFoundError("unknown study " + study);
    return it->second;
  }
  const Entry& entry(const std::string& study) const { return const_cast<StudyStore*>(this)->entry(study); }

  void append(Entry& e, json record) {
    record["seq"] = e.state.next_seq;
    StudyState next = e.state;
    next.apply(record);
    const std::string line = record.dump() + "\n";
    std::ofstream out(e.dir / "log.jsonl", std::ios::binary | std::ios::app);
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.flush();
    if (!out) throw IoError("cannot append to " + (e.dir / "log.jsonl").string());
    e.state = std::move(next);
  }

  void open(const std::filesystem::path& dir) {
    const auto log = dir / "log.jsonl";
    std::string text = read_text(log);
    // drop an interrupted final append so the next one starts on a fresh line
    const std::size_t keep = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
    if (keep != text.size()) {
      std::filesystem::resize_file(log, keep);
      text.resize(keep);
    }
    Entry e;
    e.dir = dir;
    e.state = replay(text);
    if (e.state.id.empty()) return;
    const json truth = json::parse(read_text(dir / "truth.json"));
    for (auto& [item, v] : truth.at("items").items()) {
      e.truth[item] = v.at("truth") == "real" ? kReal : kFake;
      item_study_[item] = e.state.id;
    }
    studies_[e.state.id] = std::move(e);
  }

  std::filesystem::path root_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::map<std::string, Entry> studies_;
  std::map<std::string, std::string> item_study_;
};

}  // namespace lesionforge::vtt
