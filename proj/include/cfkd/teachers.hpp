#pragma once

// Verdict sources: an oracle classifier, a cluster view over latent
// differences, and human reviewers posting through a FeedbackChannel.

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/classifier.hpp"
#include "cfkd/counterfactual.hpp"
#include "cfkd/error.hpp"
#include "cfkd/png_io.hpp"
#include "cfkd/tsne.hpp"

namespace cfkd {

enum class Judgment { true_counterfactual, false_counterfactual };
enum class VerdictSource { oracle, human, cluster };

inline std::string to_string(Judgment j) {
  return j == Judgment::true_counterfactual ? "true_counterfactual"
                                            : "false_counterfactual";
}
inline Judgment judgment_from_string(const std::string& s) {
  if (s == "true_counterfactual") return Judgment::true_counterfactual;
  if (s == "false_counterfactual") return Judgment::false_counterfactual;
  throw InputError("unknown judgment '" + s + "'");
}
inline std::string to_string(VerdictSource s) {
  switch (s) {
    case VerdictSource::oracle: return "oracle";
    case VerdictSource::human: return "human";
    case VerdictSource::cluster: return "cluster";
  }
  return "?";
}
inline VerdictSource verdict_source_from_string(const std::string& s) {
  if (s == "oracle") return VerdictSource::oracle;
  if (s == "human") return VerdictSource::human;
  if (s == "cluster") return VerdictSource::cluster;
  throw InputError("unknown verdict source '" + s + "'");
}

inline std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

struct Verdict {
  std::string record_id;
  Judgment judgment = Judgment::false_counterfactual;
  VerdictSource source = VerdictSource::oracle;
  std::string timestamp;

  bool accepted() const { return judgment == Judgment::true_counterfactual; }

  nlohmann::json to_json() const {
    return {{"record_id", record_id},
            {"judgment", to_string(judgment)},
            {"source", to_string(source)},
            {"timestamp", timestamp}};
  }
  static Verdict from_json(const nlohmann::json& j) {
    return {j.at("record_id").get<std::string>(),
            judgment_from_string(j.at("judgment")),
            verdict_source_from_string(j.at("source")),
            j.at("timestamp").get<std::string>()};
  }
};

// Fraction of accepted verdicts; nullopt for an empty list.
inline std::optional<double> feedback_accuracy(std::span<const Verdict> v) {
  if (v.empty()) return std::nullopt;
  std::size_t acc = 0;
  for (const auto& x : v) acc += x.accepted() ? 1 : 0;
  return static_cast<double>(acc) / static_cast<double>(v.size());
}

// Append-only JSON-lines verdict log.
class VerdictLog {
 public:
  VerdictLog() = default;
  VerdictLog(std::filesystem::path path, std::string run_id)
      : path_(std::move(path)), run_id_(std::move(run_id)) {}

  const std::filesystem::path& path() const { return path_; }

  void append(const Verdict& v) const {
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    auto j = v.to_json();
    j["run_id"] = run_id_;
    out << j.dump() << "\n";
    out.flush();
    if (!out) throw InputError("cannot append to " + path_.string());
  }

  static std::vector<Verdict> read(const std::filesystem::path& path) {
    std::vector<Verdict> out;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(Verdict::from_json(nlohmann::json::parse(line)));
    return out;
  }

 private:
  std::filesystem::path path_;
  std::string run_id_;
};

// ---- oracle ---------------------------------------------------------------

struct OracleTeacherConfig {
  // Extra requirement p[y_target] - max_{c != y_target} p[c] >= margin.
  // Zero keeps the plain argmax rule.
  double margin = 0.0;
};

struct OracleTeacher {
  Classifier oracle;
  double unpoisoned_test_accuracy = 0.0;
  OracleTeacherConfig config;
};

inline Verdict oracle_judge(const OracleTeacher& teacher,
                            const CounterfactualRecord& record) {
  if (!record.converged())
    throw InputError("record " + record.record_id +
                     " did not converge and cannot be judged");
  const auto p = teacher.oracle.predict(record.x_prime);
  bool ok = argmax(p) == record.y_target;
  if (ok && teacher.config.margin > 0.0) {
    double other = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c)
      if (static_cast<int>(c) != record.y_target) other = std::max(other, p[c]);
    ok = p[record.y_target] - other >= teacher.config.margin;
  }
  return {record.record_id,
          ok ? Judgment::true_counterfactual : Judgment::false_counterfactual,
          VerdictSource::oracle, iso8601_now()};
}

// ---- cluster view ---------------------------------------------------------

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool well_formed() const { return x0 <= x1 && y0 <= y1; }
  bool contains(const Point2& p) const {
    return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
  }
  static Box from_json(const nlohmann::json& j) {
    Box b{j.at("x0").get<double>(), j.at("y0").get<double>(),
          j.at("x1").get<double>(), j.at("y1").get<double>()};
    if (!b.well_formed()) throw InputError("box has min > max");
    return b;
  }
};

struct ClusterPoint {
  std::string record_id;
  Point2 position;
};

struct ClusterView {
  std::vector<ClusterPoint> points;
  std::vector<Box> boxes;

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points)
      pts.push_back({{"record_id", p.record_id},
                     {"x", p.position.x},
                     {"y", p.position.y}});
    nlohmann::json bx = nlohmann::json::array();
    for (const auto& b : boxes)
      bx.push_back({{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
    return {{"points", pts}, {"boxes", bx}};
  }
};

// One point per converged record, from a t-SNE of the delta_z vectors.
inline ClusterView cluster_embed(std::span<const CounterfactualRecord> records,
                                 const TsneConfig& config = {}) {
  std::vector<std::vector<double>> dz;
  ClusterView view;
  for (const auto& r : records) {
    if (!r.converged() || r.delta_z.empty()) continue;
    dz.push_back(r.delta_z);
    view.points.push_back({r.record_id, {}});
  }
  if (dz.size() < 2)
    throw ConfigError("cluster view needs at least 2 converged records, got " +
                      std::to_string(dz.size()));
  const auto y = tsne_embed(dz, config);
  for (std::size_t i = 0; i < y.size(); ++i) view.points[i].position = y[i];
  return view;
}

inline std::vector<Verdict> cluster_apply_selection(const ClusterView& view,
                                                    std::span<const Box> boxes) {
  for (const auto& b : boxes)
    if (!b.well_formed()) throw InputError("box has min > max");
  std::vector<Verdict> out;
  const std::string ts = iso8601_now();
  for (const auto& p : view.points) {
    const bool inside = std::any_of(boxes.begin(), boxes.end(),
                                    [&](const Box& b) { return b.contains(p.position); });
    out.push_back({p.record_id,
                   inside ? Judgment::false_counterfactual
                          : Judgment::true_counterfactual,
                   VerdictSource::cluster, ts});
  }
  return out;
}

// ---- human feedback channel ------------------------------------------------

struct PendingPair {
  std::string record_id;
  std::string original_png;        // base64
  std::string counterfactual_png;  // base64
  int y = 0;
  int y_target = 1;
  double final_confidence = 0.0;

  nlohmann::json to_json() const {
    return {{"record_id", record_id},
            {"original", original_png},
            {"counterfactual", counterfactual_png},
            {"y", y},
            {"y_target", y_target},
            {"final_confidence", final_confidence}};
  }
};

inline PendingPair make_pending_pair(const CounterfactualRecord& r) {
  return {r.record_id, base64_encode(encode_png(r.x.clipped())),
          base64_encode(encode_png(r.x_prime.clipped())), r.y, r.y_target,
          r.final_confidence};
}

// Rendezvous between a blocked teacher and concurrent HTTP clients. The
// first verdict per record wins and is on disk before post() returns.
// Verdicts found in the log at construction are reused, never re-asked.
class FeedbackChannel {
 public:
  enum class PostStatus { accepted, duplicate, unknown_record };

  explicit FeedbackChannel(std::filesystem::path log_path = {},
                           std::string run_id = {})
      : log_(log_path, std::move(run_id)) {
    if (!log_path.empty() && std::filesystem::exists(log_path))
      for (auto& v : VerdictLog::read(log_path))
        known_.emplace(v.record_id, std::move(v));
  }

  // Registers a batch and returns immediately.
  void open_batch(std::vector<PendingPair> pairs,
                  std::optional<ClusterView> view = std::nullopt) {
    std::lock_guard lock(mu_);
    batch_ = std::move(pairs);
    batch_ids_.clear();
    for (const auto& p : batch_) batch_ids_.insert(p.record_id);
    view_ = std::move(view);
    open_ = true;
    cv_.notify_all();
  }

  void close_batch() {
    std::lock_guard lock(mu_);
    open_ = false;
    batch_.clear();
    batch_ids_.clear();
    view_.reset();
  }

  bool batch_open() const {
    std::lock_guard lock(mu_);
    return open_;
  }

  // Unjudged records of the open batch, in batch order.
  std::vector<PendingPair> pending(std::size_t limit = SIZE_MAX) const {
    std::lock_guard lock(mu_);
    std::vector<PendingPair> out;
    if (!open_) return out;
    for (const auto& p : batch_) {
      if (out.size() >= limit) break;
      if (!known_.count(p.record_id)) out.push_back(p);
    }
    return out;
  }

  std::optional<ClusterView> cluster_view() const {
    std::lock_guard lock(mu_);
    if (!open_) return std::nullopt;
    return view_;
  }

  PostStatus post(const std::string& record_id, Judgment j,
                  VerdictSource source) {
    std::lock_guard lock(mu_);
    return post_locked(record_id, j, source);
  }

  // Applies boxes to the open cluster view; only still-pending points are
  // judged. Returns the number of verdicts recorded.
  std::size_t post_selection(std::span<const Box> boxes) {
    std::lock_guard lock(mu_);
    if (!open_ || !view_) return 0;
    std::size_t n = 0;
    for (const auto& v : cluster_apply_selection(*view_, boxes)) {
      if (known_.count(v.record_id)) continue;
      if (post_locked(v.record_id, v.judgment, VerdictSource::cluster) ==
          PostStatus::accepted)
        ++n;
    }
    view_->boxes.assign(boxes.begin(), boxes.end());
    return n;
  }

  std::optional<Verdict> verdict(const std::string& record_id) const {
    std::lock_guard lock(mu_);
    auto it = known_.find(record_id);
    if (it == known_.end()) return std::nullopt;
    return it->second;
  }

  // Blocks until every record of the open batch has a verdict. Verdicts come
  // back in batch order. Timeout closes the batch and throws; verdicts posted
  // so far stay in the log.
  std::vector<Verdict> await_batch(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    const bool done = cv_.wait_for(lock, timeout, [&] {
      for (const auto& id : batch_ids_)
        if (!known_.count(id)) return false;
      return true;
    });
    std::vector<Verdict> out;
    if (done)
      for (const auto& p : batch_) out.push_back(known_.at(p.record_id));
    const std::size_t total = batch_.size();
    std::size_t have = 0;
    for (const auto& id : batch_ids_) have += known_.count(id);
    open_ = false;
    batch_.clear();
    batch_ids_.clear();
    view_.reset();
    if (!done)
      throw TeacherSessionError("feedback session timed out with " +
                                std::to_string(have) + " of " +
                                std::to_string(total) + " verdicts");
    return out;
  }

  // Wakes observers waiting for a batch to open.
  bool wait_for_batch(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return open_; });
  }

 private:
  PostStatus post_locked(const std::string& record_id, Judgment j,
                         VerdictSource source) {
    if (known_.count(record_id)) return PostStatus::duplicate;
    if (!open_ || !batch_ids_.count(record_id))
      return PostStatus::unknown_record;
    Verdict v{record_id, j, source, iso8601_now()};
    log_.append(v);
    known_.emplace(record_id, std::move(v));
    cv_.notify_all();
    return PostStatus::accepted;
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  VerdictLog log_;
  std::map<std::string, Verdict> known_;
  std::vector<PendingPair> batch_;
  std::set<std::string> batch_ids_;
  std::optional<ClusterView> view_;
  bool open_ = false;
};

// ---- teacher interface -----------------------------------------------------

class Teacher {
 public:
  virtual ~Teacher() = default;
  // One verdict per converged record, in record order. Failed records are
  // never shown to the teacher.
  virtual std::vector<Verdict> judge(
      std::span<const CounterfactualRecord> records) = 0;
  // True when judge() has already written the verdicts to the run's log.
  virtual bool persists_verdicts() const { return false; }
};

inline std::vector<CounterfactualRecord> converged_only(
    std::span<const CounterfactualRecord> records) {
  std::vector<CounterfactualRecord> out;
  for (const auto& r : records)
    if (r.converged()) out.push_back(r);
  return out;
}

class OracleTeacherAdapter : public Teacher {
 public:
  explicit OracleTeacherAdapter(OracleTeacher t) : t_(std::move(t)) {}
  const OracleTeacher& oracle() const { return t_; }
  std::vector<Verdict> judge(
      std::span<const CounterfactualRecord> records) override {
    std::vector<Verdict> out;
    for (const auto& r : records)
      if (r.converged()) out.push_back(oracle_judge(t_, r));
    return out;
  }

 private:
  OracleTeacher t_;
};

// Judges with an arbitrary rule; handy for scripted and test teachers.
class FunctionTeacher : public Teacher {
 public:
  using Rule = std::function<Judgment(const CounterfactualRecord&)>;
  FunctionTeacher(Rule rule, VerdictSource source = VerdictSource::oracle)
      : rule_(std::move(rule)), source_(source) {}
  std::vector<Verdict> judge(
      std::span<const CounterfactualRecord> records) override {
    std::vector<Verdict> out;
    for (const auto& r : records)
      if (r.converged())
        out.push_back({r.record_id, rule_(r), source_, iso8601_now()});
    return out;
  }

 private:
  Rule rule_;
  VerdictSource source_;
};

class HumanTeacher : public Teacher {
 public:
  HumanTeacher(FeedbackChannel& channel, std::chrono::milliseconds timeout)
      : channel_(channel), timeout_(timeout) {}
  std::vector<Verdict> judge(
      std::span<const CounterfactualRecord> records) override {
    std::vector<PendingPair> pairs;
    for (const auto& r : records)
      if (r.converged()) pairs.push_back(make_pending_pair(r));
    channel_.open_batch(std::move(pairs));
    return channel_.await_batch(timeout_);
  }
  bool persists_verdicts() const override { return true; }

 private:
  FeedbackChannel& channel_;
  std::chrono::milliseconds timeout_;
};

class ClusterTeacher : public Teacher {
 public:
  ClusterTeacher(FeedbackChannel& channel, std::chrono::milliseconds timeout,
                 TsneConfig tsne = {})
      : channel_(channel), timeout_(timeout), tsne_(tsne) {}
  std::vector<Verdict> judge(
      std::span<const CounterfactualRecord> records) override {
    std::vector<PendingPair> pairs;
    for (const auto& r : records)
      if (r.converged()) pairs.push_back(make_pending_pair(r));
    std::optional<ClusterView> view;
    if (pairs.size() >= 2) view = cluster_embed(records, tsne_);
    channel_.open_batch(std::move(pairs), std::move(view));
    return channel_.await_batch(timeout_);
  }
  bool persists_verdicts() const override { return true; }

 private:
  FeedbackChannel& channel_;
  std::chrono::milliseconds timeout_;
  TsneConfig tsne_;
};

}  // namespace cfkd
