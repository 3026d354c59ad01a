#pragma once

// Two-alternative forced-choice study: serves pairs of transferred images that
// share a style and content, records clicks to a JSON-lines log.

#include <stylecal/calibration.hpp>

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace stylecal::study {

namespace fs = std::filesystem;

struct PoolImage {
    std::string id;
    std::string path;  // absolute
    std::string method, style_id, content_id;
    std::map<std::string, double> stats;

    double e_sum() const {
        double s = 0.0;
        for (const auto& [k, v] : stats)
            if (!k.empty() && k[0] == 'E') s += v;
        return s;
    }
};

struct Pool {
    std::vector<PoolImage> images;
    std::map<std::string, std::string> styles, contents;  // reference id -> absolute path

    const PoolImage& image(const std::string& id) const {
        for (const auto& im : images)
            if (im.id == id) return im;
        throw std::out_of_range("unknown image " + id);
    }
    calibration::ImageStats image_stats() const {
        calibration::ImageStats s;
        for (const auto& im : images) s[im.id] = im.stats;
        return s;
    }
};

/// Reads dir/pool.json as written by the bench.
inline Pool load_pool(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream in(root / "pool.json");
    if (!in) throw std::runtime_error((root / "pool.json").string() + ": cannot open");
    const auto j = nlohmann::json::parse(in);
    Pool p;
    std::set<std::string> seen;
    for (const auto& e : j.at("images")) {
        PoolImage im;
        im.id = e.at("id").get<std::string>();
        im.path = (root / e.at("path").get<std::string>()).string();
        im.method = e.value("method", "");
        im.style_id = e.at("style_id").get<std::string>();
        im.content_id = e.at("content_id").get<std::string>();
        e.at("stats").get_to(im.stats);
        if (!seen.insert(im.id).second) throw std::runtime_error("pool lists image " + im.id + " twice");
        p.images.push_back(std::move(im));
    }
    const auto styles = j.value("styles", nlohmann::json::object());
    const auto contents = j.value("contents", nlohmann::json::object());
    for (const auto& [id, path] : styles.items()) p.styles[id] = (root / path.get<std::string>()).string();
    for (const auto& [id, path] : contents.items()) p.contents[id] = (root / path.get<std::string>()).string();
    return p;
}

struct PairAssignment {
    std::string pair_id;
    std::string test;          // "E" or "C"
    std::string reference_id;  // style-<id> for E, content-<id> for C
    std::string left_id, right_id;
};

inline void to_json(nlohmann::json& j, const PairAssignment& a) {
    j = {{"pair_id", a.pair_id},
         {"test", a.test},
         {"reference_id", a.reference_id},
         {"reference_url", "/img/" + a.reference_id},
         {"left_id", a.left_id},
         {"left_url", "/img/" + a.left_id},
         {"right_id", a.right_id},
         {"right_url", "/img/" + a.right_id}};
}

/// Errors carry the HTTP status the server answers with.
struct StudyError : std::runtime_error {
    StudyError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
    int status;
};

using Clock = std::function<std::int64_t()>;

inline std::int64_t system_millis() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

class Study {
public:
    /// The C-test threshold is fixed here, over every image in the pool.
    Study(Pool pool, std::string log_path, std::uint64_t seed = std::random_device{}(), Clock clock = system_millis)
        : pool_(std::move(pool)), log_path_(std::move(log_path)), rng_(seed), clock_(std::move(clock)) {
        if (pool_.images.empty()) throw std::invalid_argument("study pool is empty");
        std::vector<double> sums;
        for (const auto& im : pool_.images) sums.push_back(im.e_sum());
        threshold_ = calibration::top_quartile_threshold(sums);
        for (size_t i = 0; i < pool_.images.size(); ++i) {
            const auto& im = pool_.images[i];
            cells_[{im.style_id, im.content_id}].push_back(i);
            index_[im.id] = i;
        }
        restore_log();
        log_.open(log_path_, std::ios::binary | std::ios::app);
        if (!log_) throw std::runtime_error(log_path_ + ": cannot open click log");
    }

    double c_threshold() const { return threshold_; }
    bool c_eligible(const PoolImage& im) const { return im.e_sum() >= threshold_; }

    PairAssignment serve_pair(const std::string& test, const std::string& session) {
        if (test != "E" && test != "C") throw StudyError(400, "test must be E or C");
        if (session.empty()) throw StudyError(400, "session token required");
        std::lock_guard lock(mu_);
        auto& seen = seen_[session];
        // Unserved unordered pairs, grouped by cell.
        std::vector<std::vector<std::pair<size_t, size_t>>> open;
        bool any_eligible = false;
        for (const auto& [cell, members] : cells_) {
            std::vector<size_t> ok;
            for (size_t i : members)
                if (test == "E" || c_eligible(pool_.images[i])) ok.push_back(i);
            std::vector<std::pair<size_t, size_t>> pairs;
            for (size_t a = 0; a < ok.size(); ++a)
                for (size_t b = a + 1; b < ok.size(); ++b) {
                    any_eligible = true;
                    if (!seen.count(pair_key(test, ok[a], ok[b]))) pairs.emplace_back(ok[a], ok[b]);
                }
            if (!pairs.empty()) open.push_back(std::move(pairs));
        }
        if (!any_eligible)
            throw StudyError(409, test == "C" ? "no eligible pairs: no cell has two top-quartile images"
                                              : "no eligible pairs: no cell has two images");
        if (open.empty()) throw StudyError(409, "pool exhausted for session");
        const auto& cell = open[std::uniform_int_distribution<size_t>(0, open.size() - 1)(rng_)];
        auto [a, b] = cell[std::uniform_int_distribution<size_t>(0, cell.size() - 1)(rng_)];
        seen.insert(pair_key(test, a, b));
        if (std::bernoulli_distribution(0.5)(rng_)) std::swap(a, b);
        const auto& left = pool_.images[a];
        PairAssignment p;
        p.pair_id = "p" + std::to_string(++counter_);
        p.test = test;
        p.reference_id = test == "E" ? "style-" + left.style_id : "content-" + left.content_id;
        p.left_id = left.id;
        p.right_id = pool_.images[b].id;
        served_[p.pair_id] = p;
        return p;
    }

    calibration::ClickRecord record_click(const std::string& pair_id, const std::string& chosen, const std::string& user_id) {
        if (chosen != "left" && chosen != "right") throw StudyError(400, "chosen must be left or right");
        if (user_id.empty()) throw StudyError(400, "user_id required");
        std::lock_guard lock(mu_);
        const auto it = served_.find(pair_id);
        if (it == served_.end()) throw StudyError(404, "unknown pair_id " + pair_id);
        if (!clicked_.insert({pair_id, user_id}).second) throw StudyError(409, "duplicate click");
        calibration::ClickRecord r;
        r.pair_id = pair_id;
        r.test = it->second.test;
        r.left_id = it->second.left_id;
        r.right_id = it->second.right_id;
        r.chosen = chosen;
        r.user_id = user_id;
        r.timestamp = clock_();
        log_ << calibration::click_line(r) << '\n' << std::flush;
        if (!log_) throw StudyError(500, "click log write failed");
        return r;
    }

    std::string export_clicks() {
        std::lock_guard lock(mu_);
        std::ifstream in(log_path_, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    /// File for an image id: a transferred image, style-<id> or content-<id>.
    std::string image_path(const std::string& id) const {
        if (auto it = index_.find(id); it != index_.end()) return pool_.images[it->second].path;
        auto ref = [&](const std::string& prefix, const std::map<std::string, std::string>& m) -> const std::string* {
            if (id.rfind(prefix, 0) != 0) return nullptr;
            auto r = m.find(id.substr(prefix.size()));
            return r == m.end() ? nullptr : &r->second;
        };
        if (const auto* p = ref("style-", pool_.styles)) return *p;
        if (const auto* p = ref("content-", pool_.contents)) return *p;
        throw StudyError(404, "unknown image " + id);
    }

    const Pool& pool() const { return pool_; }

private:
    std::string pair_key(const std::string& test, size_t a, size_t b) const {
        if (a > b) std::swap(a, b);
        return test + '|' + pool_.images[a].id + '|' + pool_.images[b].id;
    }

    // Clicks already in the log keep their pair ids taken and their duplicates rejected.
    void restore_log() {
        if (!fs::exists(log_path_)) return;
        for (const auto& r : calibration::read_clicks(log_path_)) {
            clicked_.insert({r.pair_id, r.user_id});
            PairAssignment p;
            p.pair_id = r.pair_id;
            p.test = r.test;
            p.left_id = r.left_id;
            p.right_id = r.right_id;
            served_[p.pair_id] = p;
            if (r.pair_id.size() > 1 && r.pair_id[0] == 'p' &&
                r.pair_id.find_first_not_of("0123456789", 1) == std::string::npos)
                counter_ = std::max<std::uint64_t>(counter_, std::stoull(r.pair_id.substr(1)));
        }
    }

    Pool pool_;
    std::string log_path_;
    std::mt19937_64 rng_;
    Clock clock_;
    double threshold_ = 0.0;
    std::map<std::pair<std::string, std::string>, std::vector<size_t>> cells_;
    std::map<std::string, size_t> index_;
    std::map<std::string, std::set<std::string>> seen_;  // session -> pair keys
    std::map<std::string, PairAssignment> served_;
    std::set<std::pair<std::string, std::string>> clicked_;
    std::uint64_t counter_ = 0;
    std::ofstream log_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// HTTP

inline void json_error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
}

/// Routes for GET /pair, POST /click, GET /export and GET /img/<id>.
inline void install_routes(httplib::Server& server, Study& study) {
    auto guarded = [](auto&& fn) {
        return [fn](const httplib::Request& req, httplib::Response& res) {
            try {
                fn(req, res);
            } catch (const StudyError& e) {
                json_error(res, e.status, e.what());
            } catch (const nlohmann::json::exception& e) {
                json_error(res, 400, std::string("bad request body: ") + e.what());
            } catch (const std::exception& e) {
                json_error(res, 500, e.what());
            }
        };
    };
    server.Get("/pair", guarded([&study](const httplib::Request& req, httplib::Response& res) {
                   const auto p = study.serve_pair(req.get_param_value("test"), req.get_param_value("session"));
                   res.set_content(nlohmann::json(p).dump(), "application/json");
               }));
    server.Post("/click", guarded([&study](const httplib::Request& req, httplib::Response& res) {
                    const auto j = nlohmann::json::parse(req.body);
                    const auto r = study.record_click(j.at("pair_id").get<std::string>(), j.at("chosen").get<std::string>(),
                                                      j.at("user_id").get<std::string>());
                    res.set_content(nlohmann::json{{"ok", true}, {"record", r}}.dump(), "application/json");
                }));
    server.Get("/export", guarded([&study](const httplib::Request&, httplib::Response& res) {
                   res.set_content(study.export_clicks(), "application/x-ndjson");
               }));
    server.Get(R"(/img/([A-Za-z0-9_.\-]+))", guarded([&study](const httplib::Request& req, httplib::Response& res) {
                   const std::string path = study.image_path(req.matches[1]);
                   std::ifstream in(path, std::ios::binary);
                   if (!in) throw StudyError(404, "image file missing for " + std::string(req.matches[1]));
                   std::stringstream ss;
                   ss << in.rdbuf();
                   res.set_content(ss.str(), "image/png");
               }));
}

}  // namespace stylecal::study
