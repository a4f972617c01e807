#pragma once

// HTTP front end for interactive runs. The service only reads run state and
// feeds verdicts into a run's FeedbackChannel; the loop itself runs on a
// worker thread owned by the RunHandle.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cfkd/cfkd_loop.hpp"
#include "cfkd/error.hpp"
#include "cfkd/pipeline.hpp"
#include "cfkd/teachers.hpp"

namespace cfkd {

inline constexpr int kDefaultPort = 8765;

inline std::optional<RunState> run_state_from_string(const std::string& s) {
  for (auto st : {RunState::idle, RunState::generating, RunState::awaiting_feedback,
                  RunState::retraining, RunState::done, RunState::aborted})
    if (to_string(st) == s) return st;
  return std::nullopt;
}

class RunHandle {
 public:
  RunHandle(std::string id, std::filesystem::path dir)
      : id_(std::move(id)), dir_(std::move(dir)),
        channel_(dir_ / "verdicts.jsonl", id_) {
    namespace fs = std::filesystem;
    if (std::ifstream s(dir_ / "state.json"); s) {
      try {
        if (auto st = run_state_from_string(nlohmann::json::parse(s).value("state", "")))
          state_ = *st;
      } catch (const nlohmann::json::exception&) {
      }
    }
    if (fs::exists(dir_ / "reports.json")) {
      try {
        reports_ = read_run_reports(dir_, false);
      } catch (const std::exception&) {
      }
    }
  }

  ~RunHandle() { join(); }

  const std::string& id() const { return id_; }
  const std::filesystem::path& dir() const { return dir_; }
  FeedbackChannel& channel() { return channel_; }

  RunState state() const {
    std::lock_guard lock(mu_);
    return state_;
  }
  std::vector<IterationReport> reports() const {
    std::lock_guard lock(mu_);
    return reports_;
  }
  std::string error() const {
    std::lock_guard lock(mu_);
    return error_;
  }

  RunObserver observer() {
    RunObserver o;
    o.on_state = [this](RunState s) {
      std::lock_guard lock(mu_);
      state_ = s;
    };
    o.on_report = [this](const IterationReport& r) {
      std::lock_guard lock(mu_);
      reports_.push_back(r);
    };
    return o;
  }

  // Runs body on a worker thread. Exceptions end the run in `aborted`.
  void start(std::function<void(RunHandle&)> body) {
    join();
    {
      std::lock_guard lock(mu_);
      reports_.clear();
      error_.clear();
    }
    worker_ = std::thread([this, body = std::move(body)] {
      try {
        body(*this);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu_);
        state_ = RunState::aborted;
        error_ = e.what();
        std::ofstream(dir_ / "state.json")
            << nlohmann::json{{"state", "aborted"}, {"error", error_}}.dump() << "\n";
      }
    });
  }

  void join() {
    if (worker_.joinable()) worker_.join();
  }

 private:
  std::string id_;
  std::filesystem::path dir_;
  FeedbackChannel channel_;
  mutable std::mutex mu_;
  RunState state_ = RunState::idle;
  std::vector<IterationReport> reports_;
  std::string error_;
  std::thread worker_;
};

// Starts (or resumes) distillation for handle.id() under ws.root()/runs.
// Verdicts already in the run's log are reused; the rest are awaited from
// HTTP clients (human/cluster) or computed (oracle).
inline void launch_run(RunHandle& handle, PipelineConfig config,
                       std::filesystem::path root) {
  handle.start([config = std::move(config), root = std::move(root)](RunHandle& h) {
    Workspace ws(root, config);
    const auto timeout = std::chrono::milliseconds(
        static_cast<long long>(config.distill.feedback_timeout_seconds * 1000.0));
    std::unique_ptr<Teacher> teacher;
    if (config.distill.teacher == "human")
      teacher = std::make_unique<HumanTeacher>(h.channel(), timeout);
    else if (config.distill.teacher == "cluster")
      teacher = std::make_unique<ClusterTeacher>(h.channel(), timeout);
    else
      teacher = std::make_unique<OracleTeacherAdapter>(ws.oracle());
    run_distillation(ws, *teacher, h.id(), h.observer());
  });
}

class HttpService {
 public:
  HttpService() { routes(); }
  ~HttpService() { stop(); }

  void add(std::shared_ptr<RunHandle> run) {
    std::lock_guard lock(mu_);
    runs_[run->id()] = std::move(run);
  }

  std::shared_ptr<RunHandle> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = runs_.find(id);
    return it == runs_.end() ? nullptr : it->second;
  }

  // Blocking.
  bool listen(const std::string& host, int port) { return svr_.listen(host, port); }

  // Binds an ephemeral port and serves on a background thread.
  int start_background(const std::string& host = "127.0.0.1") {
    const int port = svr_.bind_to_any_port(host);
    if (port < 0) throw ConfigError("cannot bind an HTTP port", "--port");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
    return port;
  }

  void stop() {
    svr_.stop();
    if (thread_.joinable()) thread_.join();
  }

  httplib::Server& server() { return svr_; }

 private:
  static void json_reply(httplib::Response& res, const nlohmann::json& j,
                         int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json; charset=utf-8");
  }
  static void error_reply(httplib::Response& res, int status,
                          const std::string& msg) {
    json_reply(res, {{"error", msg}}, status);
  }

  // Resolves {id} or writes a 404.
  std::shared_ptr<RunHandle> run_or_404(const httplib::Request& req,
                                        httplib::Response& res) const {
    auto run = find(req.path_params.at("id"));
    if (!run) error_reply(res, 404, "unknown run '" + req.path_params.at("id") + "'");
    return run;
  }

  void routes() {
    svr_.Get("/runs/:id", [this](const httplib::Request& req, httplib::Response& res) {
      auto run = run_or_404(req, res);
      if (!run) return;
      json_reply(res, {{"run_id", run->id()},
                       {"state", to_string(run->state())},
                       {"iterations_completed", run->reports().size()},
                       {"pending", run->channel().pending().size()},
                       {"error", run->error()}});
    });

    svr_.Get("/runs/:id/pending", [this](const httplib::Request& req, httplib::Response& res) {
      auto run = run_or_404(req, res);
      if (!run) return;
      std::size_t limit = SIZE_MAX;
      if (req.has_param("limit")) {
        const std::string v = req.get_param_value("limit");
        try {
          std::size_t pos = 0;
          const long long n = std::stoll(v, &pos);
          if (pos != v.size() || n < 0) throw std::invalid_argument(v);
          limit = static_cast<std::size_t>(n);
        } catch (const std::exception&) {
          return error_reply(res, 400, "limit must be a non-negative integer");
        }
      }
      nlohmann::json arr = nlohmann::json::array();
      if (run->state() == RunState::awaiting_feedback)
        for (const auto& p : run->channel().pending(limit)) arr.push_back(p.to_json());
      json_reply(res, arr);
    });

    svr_.Post("/runs/:id/feedback", [this](const httplib::Request& req, httplib::Response& res) {
      auto run = run_or_404(req, res);
      if (!run) return;
      std::string record;
      Judgment judgment;
      try {
        const auto j = nlohmann::json::parse(req.body);
        record = j.at("record_id").get<std::string>();
        judgment = judgment_from_string(j.at("judgment").get<std::string>());
      } catch (const std::exception& e) {
        return error_reply(res, 400, std::string("malformed feedback: ") + e.what());
      }
      switch (run->channel().post(record, judgment, VerdictSource::human)) {
        case FeedbackChannel::PostStatus::accepted: res.status = 204; return;
        case FeedbackChannel::PostStatus::duplicate:
          return error_reply(res, 409, "record '" + record + "' already judged");
        case FeedbackChannel::PostStatus::unknown_record:
          return error_reply(res, 404, "record '" + record + "' is not pending");
      }
    });

    svr_.Get("/runs/:id/clusters", [this](const httplib::Request& req, httplib::Response& res) {
      auto run = run_or_404(req, res);
      if (!run) return;
      const auto view = run->channel().cluster_view();
      json_reply(res, view ? view->to_json()
                           : nlohmann::json{{"points", nlohmann::json::array()},
                                            {"boxes", nlohmann::json::array()}});
    });

    svr_.Post("/runs/:id/cluster-selection",
              [this](const httplib::Request& req, httplib::Response& res) {
                auto run = run_or_404(req, res);
                if (!run) return;
                std::vector<Box> boxes;
                try {
                  const auto j = nlohmann::json::parse(req.body);
                  const auto& arr = j.at("boxes");
                  if (!arr.is_array()) throw InputError("boxes must be an array");
                  for (const auto& b : arr) boxes.push_back(Box::from_json(b));
                } catch (const std::exception& e) {
                  return error_reply(res, 400, std::string("malformed selection: ") + e.what());
                }
                if (!run->channel().cluster_view())
                  return error_reply(res, 409, "no cluster view is awaiting feedback");
                run->channel().post_selection(boxes);
                res.status = 204;
              });

    svr_.Get("/runs/:id/metrics", [this](const httplib::Request& req, httplib::Response& res) {
      auto run = run_or_404(req, res);
      if (!run) return;
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& r : run->reports()) arr.push_back(r.to_json());
      json_reply(res, arr);
    });
  }

  httplib::Server svr_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<RunHandle>> runs_;
  std::thread thread_;
};

}  // namespace cfkd
