#pragma once

// HTTP facade for the interactive loop. One session per process, backed by a
// stage-by-stage run directory (see stages.hpp). Reviewer state lives under
// <run>/review/: corrections/, status.json, audit.jsonl, retrain_<n>.json.
//
//   GET  /api/queue?center=&limit=
//   GET  /api/patch/{id}/image | heatmap | prediction | correction
//   POST /api/patch/{id}/correction   {"png_base64": ...} or {"rle": {...}}
//   POST /api/patch/{id}/skip
//   POST /api/retrain                 202 {"job_id": n}
//   GET  /api/retrain/status
//   GET  /api/metrics

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "uga/error.hpp"
#include "uga/evaluation.hpp"
#include "uga/json_util.hpp"
#include "uga/png_io.hpp"
#include "uga/sampler.hpp"
#include "uga/stages.hpp"
#include "uga/uncertainty.hpp"

namespace uga {

namespace base64 {

inline std::string encode(const std::vector<std::uint8_t>& bytes) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i + 1 == bytes.size()) {
        const std::uint32_t v = bytes[i] << 16;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

/// Strict decoding; whitespace is ignored and a data-URL prefix is accepted.
inline std::vector<std::uint8_t> decode(std::string_view text) {
    if (const auto comma = text.find(','); text.starts_with("data:") && comma != std::string_view::npos)
        text.remove_prefix(comma + 1);
    std::vector<std::uint8_t> out;
    std::uint32_t acc = 0;
    int bits = 0, padding = 0;
    for (const char ch : text) {
        int v;
        if (ch >= 'A' && ch <= 'Z')
            v = ch - 'A';
        else if (ch >= 'a' && ch <= 'z')
            v = ch - 'a' + 26;
        else if (ch >= '0' && ch <= '9')
            v = ch - '0' + 52;
        else if (ch == '+' || ch == '-')
            v = 62;
        else if (ch == '/' || ch == '_')
            v = 63;
        else if (ch == '=') {
            ++padding;
            continue;
        } else if (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t')
            continue;
        else
            throw DataError("invalid base64 character");
        if (padding) throw DataError("base64 data after padding");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xffu));
        }
    }
    if (padding > 2) throw DataError("invalid base64 padding");
    return out;
}

} // namespace base64

/// Row-major run-length mask: counts alternate background / foreground runs,
/// starting with background (possibly 0).
inline Mask mask_from_rle(const json& rle) {
    const int h = rle.at("height").get<int>(), w = rle.at("width").get<int>();
    if (h <= 0 || w <= 0) throw DataError("rle: non-positive dimensions");
    Mask m(h, w);
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (const auto& c : rle.at("counts")) {
        const auto n = c.get<std::int64_t>();
        if (n < 0 || pos + static_cast<std::size_t>(n) > m.data.size()) throw DataError("rle: counts exceed mask size");
        std::fill_n(m.data.begin() + static_cast<std::ptrdiff_t>(pos), n, value);
        pos += static_cast<std::size_t>(n);
        value ^= 1;
    }
    if (pos != m.data.size()) throw DataError("rle: counts do not cover the mask");
    return m;
}

inline json mask_to_rle(const Mask& m) {
    json counts = json::array();
    std::uint8_t value = 0;
    std::int64_t run = 0;
    for (const auto v : m.data) {
        if ((v != 0) != (value != 0)) {
            counts.push_back(run);
            run = 0;
            value ^= 1;
        }
        ++run;
    }
    counts.push_back(run);
    return json{{"height", m.height}, {"width", m.width}, {"counts", counts}};
}

enum class RetrainState { idle, running, failed, done };

inline const char* to_string(RetrainState s) {
    switch (s) {
    case RetrainState::idle: return "idle";
    case RetrainState::running: return "running";
    case RetrainState::failed: return "failed";
    case RetrainState::done: return "done";
    }
    return "?";
}

struct ServiceOptions {
    int jobs = 1;
    std::filesystem::path ui_dir; ///< served at / when it exists
};

class ReviewService {
public:
    explicit ReviewService(std::filesystem::path run_dir, ServiceOptions options = {})
        : dir_{std::move(run_dir)}, options_(std::move(options)) {
        config_ = load_run_config(dir_);
        cohort_ = load_run_cohort(dir_);
        run_state_ = RunState::load(dir_);
        model_name_ = run_state_.current_model;
        model_ = load_model(dir_.model(model_name_));
        if (std::filesystem::exists(dir_.ranking()))
            set_queue(ranking_from_json(read_json_file(dir_.ranking())));
        load_review_state();
        ensure_baseline_metrics();
        routes();
    }

    ~ReviewService() {
        stop();
        if (worker_.joinable()) worker_.join();
    }

    ReviewService(const ReviewService&) = delete;
    ReviewService& operator=(const ReviewService&) = delete;

    httplib::Server& server() { return server_; }

    /// Binds to an ephemeral port on host and returns it.
    int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
    bool listen() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }

    /// Blocks until a running retrain (if any) has finished.
    void wait_for_retrain() {
        std::unique_lock lock(job_mutex_);
        job_done_.wait(lock, [&] { return retrain_state_ != RetrainState::running; });
    }

private:
    struct QueueEntry {
        RankedPatch patch;
        std::string id;
    };

    RunDir dir_;
    ServiceOptions options_;
    ExperimentConfig config_;
    std::vector<Slide> cohort_;
    RunState run_state_;

    // session state; mutations hold the exclusive lock
    mutable std::shared_mutex mutex_;
    std::string model_name_;
    EnsembleModel model_;
    bool ranked_ = false;
    std::vector<QueueEntry> queue_;
    std::map<std::string, std::size_t> queue_index_;
    std::map<std::string, ReviewStatus> status_;
    std::map<std::string, CorrectedPatch> corrections_;
    std::map<std::string, std::string> heatmap_cache_; ///< id -> PNG bytes for model_
    std::uint64_t audit_seq_ = 0;

    // retrain job
    std::mutex job_mutex_;
    std::condition_variable job_done_;
    RetrainState retrain_state_ = RetrainState::idle;
    int job_id_ = 0;
    std::string job_error_;
    std::vector<std::string> job_corrections_;
    std::jthread worker_;

    httplib::Server server_;

    std::filesystem::path review_dir() const { return dir_.root / "review"; }

    int patch_size() const { return config_.train.patch_size; }

    // ---- state helpers (caller holds the lock where needed) ----

    void set_queue(const Ranking& ranking) {
        const RankingKey key = config_.sampler.ranking_key;
        queue_.clear();
        for (const auto& [center, list] : ranking)
            for (const auto& p : list) queue_.push_back({p, patch_id(p)});
        std::stable_sort(queue_.begin(), queue_.end(), [key](const QueueEntry& a, const QueueEntry& b) {
            if (a.patch.key(key) != b.patch.key(key)) return a.patch.key(key) > b.patch.key(key);
            return a.id < b.id;
        });
        queue_index_.clear();
        for (std::size_t i = 0; i < queue_.size(); ++i) queue_index_[queue_[i].id] = i;
        ranked_ = true;
        heatmap_cache_.clear();
    }

    ReviewStatus status_of(const std::string& id) const {
        const auto it = status_.find(id);
        return it == status_.end() ? ReviewStatus::pending : it->second;
    }

    json entry_json(const QueueEntry& e) const {
        json j = ranked_patch_json(e.patch);
        j["id"] = e.id;
        j["review_status"] = to_string(status_of(e.id));
        j["size"] = patch_size();
        return j;
    }

    /// Patch location for an id in the queue or among stored corrections.
    std::optional<std::pair<std::string, Point>> locate(const std::string& id) const {
        if (const auto it = queue_index_.find(id); it != queue_index_.end())
            return std::pair{queue_[it->second].patch.score.slide_id, queue_[it->second].patch.score.origin};
        if (const auto it = corrections_.find(id); it != corrections_.end())
            return std::pair{it->second.slide_id, it->second.origin};
        return std::nullopt;
    }

    Image crop(const std::string& slide_id, Point origin) const {
        return find_slide(cohort_, slide_id).image.crop(origin, patch_size(), patch_size());
    }

    void save_status() const {
        json j = json::object();
        for (const auto& [id, s] : status_) j[id] = to_string(s);
        write_json_file(review_dir() / "status.json", j);
    }

    void append_audit(json entry) {
        entry["seq"] = ++audit_seq_;
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char stamp[32];
        std::tm tm{};
        gmtime_r(&now, &tm);
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
        entry["time"] = stamp;
        std::filesystem::create_directories(review_dir());
        std::ofstream out(review_dir() / "audit.jsonl", std::ios::app);
        out << entry.dump() << '\n';
    }

    void load_review_state() {
        const auto status_file = review_dir() / "status.json";
        if (std::filesystem::exists(status_file))
            for (const auto& [id, s] : read_json_file(status_file).items()) {
                const std::string v = s.get<std::string>();
                status_[id] = v == "corrected" ? ReviewStatus::corrected
                              : v == "skipped" ? ReviewStatus::skipped
                                               : ReviewStatus::pending;
            }
        const auto corr_dir = review_dir() / "corrections";
        if (std::filesystem::exists(corr_dir / "index.json"))
            for (auto& cp : read_corrections(corr_dir)) corrections_[patch_id(cp.slide_id, cp.origin)] = std::move(cp);
        const auto audit = review_dir() / "audit.jsonl";
        if (std::filesystem::exists(audit)) {
            std::ifstream in(audit);
            std::string line;
            while (std::getline(in, line))
                if (!line.empty()) ++audit_seq_;
        }
    }

    void save_corrections() const {
        std::vector<CorrectedPatch> list;
        for (const auto& [id, cp] : corrections_) list.push_back(cp);
        write_corrections(review_dir() / "corrections", list);
    }

    void ensure_baseline_metrics() {
        if (!run_state_.history.empty()) return;
        const auto test = detail::slides_of(cohort_, Split::test);
        const auto report = evaluate(model_, test, patch_size(), config_.evaluation, config_.uncertainty, options_.jobs);
        write_report(dir_.metrics(), model_name_, report);
        run_state_.record_evaluation(model_name_, model_.id());
        run_state_.save(dir_);
    }

    // ---- responses ----

    static void send_json(httplib::Response& res, const json& j, int status = 200) {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& message) {
        send_json(res, json{{"error", message}}, status);
    }

    static std::string etag_of(const std::string& bytes) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const unsigned char c : bytes) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        char buf[20];
        std::snprintf(buf, sizeof buf, "\"%016llx\"", static_cast<unsigned long long>(h));
        return buf;
    }

    static void send_png(const httplib::Request& req, httplib::Response& res, std::string bytes) {
        const std::string etag = etag_of(bytes);
        res.set_header("ETag", etag);
        res.set_header("Cache-Control", "no-cache");
        if (req.get_header_value("If-None-Match") == etag) {
            res.status = 304;
            return;
        }
        res.status = 200;
        res.set_content(std::move(bytes), "image/png");
    }

    static std::string png_string(const png::Raster& r) {
        const auto bytes = png::encode(r);
        return std::string(bytes.begin(), bytes.end());
    }

    // ---- handlers ----

    void get_queue(const httplib::Request& req, httplib::Response& res) {
        std::shared_lock lock(mutex_);
        if (!ranked_) return send_error(res, 409, "ranking not computed; run the rank stage first");
        std::optional<int> center;
        std::optional<std::size_t> limit;
        try {
            if (req.has_param("center") && !req.get_param_value("center").empty())
                center = std::stoi(req.get_param_value("center"));
            if (req.has_param("limit") && !req.get_param_value("limit").empty()) {
                const long v = std::stol(req.get_param_value("limit"));
                if (v < 0) return send_error(res, 400, "limit must be >= 0");
                limit = static_cast<std::size_t>(v);
            }
        } catch (const std::exception&) {
            return send_error(res, 400, "center and limit must be integers");
        }
        json out = json::array();
        for (const auto& e : queue_) {
            if (limit && out.size() >= *limit) break;
            if (center && e.patch.score.center != *center) continue;
            out.push_back(entry_json(e));
        }
        send_json(res, out);
    }

    void get_image(const httplib::Request& req, httplib::Response& res) {
        std::shared_lock lock(mutex_);
        const auto where = locate(req.matches[1]);
        if (!where) return send_error(res, 404, "unknown patch id");
        send_png(req, res, png_string(png::from_image(crop(where->first, where->second))));
    }

    void get_heatmap(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        {
            std::shared_lock lock(mutex_);
            if (!locate(id)) return send_error(res, 404, "unknown patch id");
            if (const auto it = heatmap_cache_.find(id); it != heatmap_cache_.end()) return send_png(req, res, it->second);
        }
        std::unique_lock lock(mutex_);
        const auto where = locate(id);
        if (!where) return send_error(res, 404, "unknown patch id");
        Workspace<float> ws;
        const auto maps = ensemble_log_probs(model_, crop(where->first, where->second), ws);
        const std::string bytes = png_string(render_heatmap(pixel_disagreement(maps, config_.uncertainty.variant)));
        heatmap_cache_[id] = bytes;
        send_png(req, res, bytes);
    }

    void get_prediction(const httplib::Request& req, httplib::Response& res) {
        std::shared_lock lock(mutex_);
        const auto where = locate(req.matches[1]);
        if (!where) return send_error(res, 404, "unknown patch id");
        Workspace<float> ws;
        const auto maps = ensemble_log_probs(model_, crop(where->first, where->second), ws);
        const std::size_t plane = static_cast<std::size_t>(patch_size()) * patch_size();
        Mask m(patch_size(), patch_size());
        for (std::size_t p = 0; p < plane; ++p) {
            double mean = 0.0;
            for (const auto& lp : maps) mean += std::exp(static_cast<double>(lp.data[plane + p]));
            m.data[p] = mean / static_cast<double>(maps.size()) >= config_.evaluation.threshold ? 1 : 0;
        }
        send_png(req, res, png_string(png::from_mask(m)));
    }

    void get_correction(const httplib::Request& req, httplib::Response& res) {
        std::shared_lock lock(mutex_);
        const std::string id = req.matches[1];
        if (!locate(id)) return send_error(res, 404, "unknown patch id");
        const auto it = corrections_.find(id);
        if (it == corrections_.end()) return send_error(res, 404, "no correction stored for " + id);
        send_png(req, res, png_string(png::from_mask(it->second.mask)));
    }

    void post_correction(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        Mask mask;
        try {
            const json body = json::parse(req.body);
            if (body.contains("png_base64")) {
                const png::Raster r = png::decode(base64::decode(body.at("png_base64").get<std::string>()));
                if (r.channels != 1) return send_error(res, 400, "mask PNG must be single-channel grayscale");
                mask = png::to_mask(r);
            } else if (body.contains("rle")) {
                mask = mask_from_rle(body.at("rle"));
            } else {
                return send_error(res, 400, "body needs png_base64 or rle");
            }
        } catch (const std::exception& e) {
            return send_error(res, 400, std::string("undecodable mask: ") + e.what());
        }
        std::unique_lock lock(mutex_);
        const auto where = locate(id);
        if (!where) return send_error(res, 404, "unknown patch id");
        if (mask.height != patch_size() || mask.width != patch_size())
            return send_error(res, 400, "mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                                            ", patch is " + std::to_string(patch_size()) + "x" +
                                            std::to_string(patch_size()));
        const bool overwrite = corrections_.contains(id);
        corrections_[id] = CorrectedPatch{crop(where->first, where->second), mask, where->first, where->second,
                                          CorrectionSource::human};
        status_[id] = ReviewStatus::corrected;
        save_corrections();
        save_status();
        append_audit({{"action", "correction"}, {"id", id}, {"overwrite", overwrite}, {"foreground", mask.count()}});
        send_json(res, json{{"id", id}, {"review_status", "corrected"}, {"overwrite", overwrite}});
    }

    void post_skip(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        std::unique_lock lock(mutex_);
        if (!queue_index_.contains(id)) return send_error(res, 404, "unknown patch id");
        if (status_of(id) == ReviewStatus::corrected) return send_error(res, 409, "patch already corrected");
        status_[id] = ReviewStatus::skipped;
        save_status();
        append_audit({{"action", "skip"}, {"id", id}});
        send_json(res, json{{"id", id}, {"review_status", "skipped"}});
    }

    json retrain_status_json() {
        std::lock_guard lock(job_mutex_);
        json j{{"state", to_string(retrain_state_)}, {"job_id", job_id_}, {"corrections_used", job_corrections_}};
        if (!job_error_.empty()) j["error"] = job_error_;
        std::shared_lock state_lock(mutex_);
        j["model"] = model_name_;
        j["model_id"] = model_.id();
        return j;
    }

    void post_retrain(httplib::Response& res) {
        std::vector<CorrectedPatch> snapshot;
        std::vector<std::string> ids;
        EnsembleModel parent;
        int job = 0;
        {
            std::lock_guard job_lock(job_mutex_);
            if (retrain_state_ == RetrainState::running) return send_error(res, 409, "a retrain is already running");
            std::shared_lock lock(mutex_);
            if (corrections_.empty()) return send_error(res, 409, "no corrections to train on");
            for (const auto& [id, cp] : corrections_) {
                ids.push_back(id);
                snapshot.push_back(cp);
            }
            parent = model_;
            job = ++job_id_;
            retrain_state_ = RetrainState::running;
            job_error_.clear();
            job_corrections_ = ids;
        }
        if (worker_.joinable()) worker_.join();
        worker_ = std::jthread([this, job, snapshot = std::move(snapshot), ids, parent = std::move(parent)]() mutable {
            run_retrain(job, std::move(snapshot), ids, parent);
        });
        send_json(res, json{{"job_id", job}, {"state", "running"}}, 202);
    }

    void run_retrain(int job, std::vector<CorrectedPatch> snapshot, const std::vector<std::string>& ids,
                     const EnsembleModel& parent) {
        try {
            const std::string name = "review_r" + std::to_string(job);
            write_json_file(review_dir() / ("retrain_" + std::to_string(job) + ".json"),
                            json{{"job_id", job}, {"parent_id", parent.id()}, {"corrections", ids}});
            const std::uint64_t seed = derive_seed(stage_seed(config_), {0x5e55, static_cast<std::uint64_t>(job)});
            const PatchSource source = augmented_source(
                std::move(snapshot), config_.sampler.augment_copies, config_.sampler.hue_range,
                [seed](std::size_t i) { return derive_seed(seed, {static_cast<std::uint64_t>(i)}); });
            TrainConfig tc = config_.train;
            tc.steps = config_.retrain.steps;
            tc.seed = seed;
            EnsembleModel model = continue_training(parent, detail::slides_of(cohort_, Split::train), source, tc,
                                                    config_.retrain.new_mix, options_.jobs)
                                      .model;
            save_model(dir_.model(name), model);
            const auto report = evaluate(model, detail::slides_of(cohort_, Split::test), patch_size(),
                                         config_.evaluation, config_.uncertainty, options_.jobs);
            write_report(dir_.metrics(), name, report);

            // re-rank the pool minus everything corrected so far
            Ranking ranking = rank_pool(detail::slides_of(cohort_, Split::pool), model, patch_size(), config_.sampler,
                                        config_.uncertainty, options_.jobs);
            {
                std::shared_lock lock(mutex_);
                for (auto& [center, list] : ranking) {
                    std::erase_if(list, [&](const RankedPatch& p) { return corrections_.contains(patch_id(p)); });
                    detail::sort_and_rank(list, config_.sampler.ranking_key);
                }
            }
            write_json_file(dir_.ranking(), ranking_json(ranking));
            {
                std::unique_lock lock(mutex_);
                model_ = std::move(model);
                model_name_ = name;
                set_queue(ranking);
                run_state_.current_model = name;
                run_state_.record_evaluation(name, model_.id());
                run_state_.save(dir_);
                append_audit({{"action", "retrain"}, {"job_id", job}, {"model_id", model_.id()}, {"corrections", ids}});
            }
            std::lock_guard job_lock(job_mutex_);
            retrain_state_ = RetrainState::done;
        } catch (const std::exception& e) {
            std::lock_guard job_lock(job_mutex_);
            retrain_state_ = RetrainState::failed;
            job_error_ = e.what();
        }
        job_done_.notify_all();
    }

    void get_metrics(httplib::Response& res) {
        std::shared_lock lock(mutex_);
        json rounds = json::array();
        for (const auto& e : run_state_.history) {
            json r = e;
            r["report"] = read_json_file(dir_.root / e.at("metrics").get<std::string>());
            rounds.push_back(std::move(r));
        }
        send_json(res, json{{"rounds", rounds}});
    }

    template <class F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const std::exception& e) {
                send_error(res, 500, e.what());
            }
        };
    }

    void routes() {
        const std::string id = R"(/api/patch/([A-Za-z0-9_\-]+))";
        server_.Get("/api/queue", guarded([this](const auto& q, auto& r) { get_queue(q, r); }));
        server_.Get(id + "/image", guarded([this](const auto& q, auto& r) { get_image(q, r); }));
        server_.Get(id + "/heatmap", guarded([this](const auto& q, auto& r) { get_heatmap(q, r); }));
        server_.Get(id + "/prediction", guarded([this](const auto& q, auto& r) { get_prediction(q, r); }));
        server_.Get(id + "/correction", guarded([this](const auto& q, auto& r) { get_correction(q, r); }));
        server_.Post(id + "/correction", guarded([this](const auto& q, auto& r) { post_correction(q, r); }));
        server_.Post(id + "/skip", guarded([this](const auto& q, auto& r) { post_skip(q, r); }));
        server_.Post("/api/retrain", guarded([this](const auto&, auto& r) { post_retrain(r); }));
        server_.Get("/api/retrain/status", guarded([this](const auto&, auto& r) { send_json(r, retrain_status_json()); }));
        server_.Get("/api/metrics", guarded([this](const auto&, auto& r) { get_metrics(r); }));
        if (!options_.ui_dir.empty() && std::filesystem::is_directory(options_.ui_dir))
            server_.set_mount_point("/", options_.ui_dir.string());
    }
};

} // namespace uga
