#pragma once

// Method-comparison bench: datasets of (weight, style, content), the trial
// ledger, EC summaries, admissibility, regressions and report files.

#include <stylecal/calibration.hpp>
#include <stylecal/coherence.hpp>
#include <stylecal/fixtures.hpp>
#include <stylecal/stats.hpp>
#include <stylecal/transfer.hpp>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

namespace stylecal::harness {

namespace fs = std::filesystem;
using transfer::format_number;
using transfer::Method;

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetKind { Main, Aggressive };

struct DatasetOptions {
    int weights = 20;
    int pairs_per_weight = 15;
};

struct Triple {
    double weight = 0.0;
    std::string style_id, content_id;
    bool operator==(const Triple&) const = default;
};

/// Weight range of a dataset kind.
inline std::pair<double, double> weight_range(DatasetKind k) {
    return k == DatasetKind::Main ? std::pair{50.0, 2000.0} : std::pair{2000.0, 10000.0};
}

namespace detail {

// Portable draws so datasets do not depend on the standard library's distributions.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do v = rng();
    while (v >= limit);
    return v % n;
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

inline std::vector<Triple> build_dataset(DatasetKind kind, const std::vector<std::string>& styles,
                                         const std::vector<std::string>& contents, std::uint64_t seed,
                                         DatasetOptions opt = {}) {
    if (styles.empty() || contents.empty()) throw std::invalid_argument("dataset needs at least one style and one content");
    if (opt.weights < 1 || opt.pairs_per_weight < 1) throw std::invalid_argument("dataset counts must be positive");
    std::mt19937_64 rng(seed);
    const auto [lo, hi] = weight_range(kind);
    std::vector<double> weights(opt.weights);
    for (int i = 0; i < opt.weights; ++i) {
        if (kind == DatasetKind::Main)
            weights[i] = opt.weights == 1 ? lo : lo + (hi - lo) * i / (opt.weights - 1);
        else
            weights[i] = lo + (hi - lo) * detail::uniform01(rng);
    }
    std::vector<Triple> out;
    for (double w : weights)
        for (int p = 0; p < opt.pairs_per_weight; ++p) {
            const auto s = detail::uniform_index(rng, styles.size());
            const auto c = detail::uniform_index(rng, contents.size());
            out.push_back({w, styles[s], contents[c]});
        }
    return out;
}

/// Every style with every content at each of `weights` evenly spaced weights of the kind's range.
inline std::vector<Triple> desk_dataset(const std::vector<std::string>& styles, const std::vector<std::string>& contents,
                                        int weights = 4, DatasetKind kind = DatasetKind::Main) {
    if (styles.empty() || contents.empty()) throw std::invalid_argument("dataset needs at least one style and one content");
    if (weights < 1) throw std::invalid_argument("dataset counts must be positive");
    std::vector<Triple> out;
    const auto [lo, hi] = weight_range(kind);
    for (int i = 0; i < weights; ++i) {
        const double w = weights == 1 ? lo : lo + (hi - lo) * i / (weights - 1);
        for (const auto& s : styles)
            for (const auto& c : contents) out.push_back({w, s, c});
    }
    return out;
}

struct Job {
    Triple triple;
    Method method = Method::Gatys;
};

/// Aggressive variants run on the aggressive set, every other method on the main set.
inline std::vector<Job> plan(const std::vector<Method>& methods, const std::vector<Triple>& main,
                             const std::vector<Triple>& aggressive) {
    std::vector<Job> jobs;
    for (Method m : methods)
        for (const auto& t : transfer::is_aggressive(m) ? aggressive : main) jobs.push_back({t, m});
    return jobs;
}

inline std::vector<Job> plan(const std::vector<Method>& methods, const std::vector<Triple>& dataset) {
    return plan(methods, dataset, dataset);
}

// ---------------------------------------------------------------------------
// Trials and the ledger

struct Trial {
    Method method = Method::Gatys;
    std::string style_id, content_id;
    double weight = 0.0;
    std::uint64_t seed = 1;
    std::array<double, 5> E{};
    double C = 0.0;
    double e_score = 0.0, c_score = 0.0;
    std::string image;  // relative to the bench directory
    std::string error;  // empty on success

    bool ok() const { return error.empty(); }
    std::string key() const {
        return transfer::to_string(method) + '|' + style_id + '|' + content_id + '|' + format_number(weight) + '|' +
               std::to_string(seed);
    }
    std::map<std::string, double> stats() const {
        std::map<std::string, double> m;
        for (int i = 0; i < 5; ++i) m["E" + std::to_string(i + 1)] = E[i];
        m["C"] = C;
        return m;
    }
};

inline const std::string kLedgerHeader =
    "method,style_id,content_id,weight,seed,E1,E2,E3,E4,E5,C,e_score,c_score,image,error";

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += '"';
        q += (ch == '\n' || ch == '\r') ? ' ' : ch;
    }
    return q + '"';
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline double parse_number(const std::string& s) {
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("bad number '" + s + "'");
    return v;
}

inline std::string trial_line(const Trial& t) {
    std::ostringstream os;
    os << transfer::to_string(t.method) << ',' << csv_field(t.style_id) << ',' << csv_field(t.content_id) << ','
       << format_number(t.weight) << ',' << t.seed;
    for (double e : t.E) os << ',' << format_number(e);
    os << ',' << format_number(t.C) << ',' << format_number(t.e_score) << ',' << format_number(t.c_score) << ','
       << csv_field(t.image) << ',' << csv_field(t.error);
    return os.str();
}

inline Trial parse_trial(const std::string& line) {
    const auto f = split_csv(line);
    if (f.size() != 15) throw std::invalid_argument("ledger row has " + std::to_string(f.size()) + " fields, expected 15");
    Trial t;
    t.method = transfer::parse_method(f[0]);
    t.style_id = f[1];
    t.content_id = f[2];
    t.weight = parse_number(f[3]);
    t.seed = std::stoull(f[4]);
    for (int i = 0; i < 5; ++i) t.E[i] = parse_number(f[5 + i]);
    t.C = parse_number(f[10]);
    t.e_score = parse_number(f[11]);
    t.c_score = parse_number(f[12]);
    t.image = f[13];
    t.error = f[14];
    return t;
}

/// Reads a ledger. A final line without a newline (an interrupted append) is
/// ignored; any other malformed row is an error. Later rows win on repeated keys.
inline std::vector<Trial> read_ledger(const std::string& path) {
    std::vector<Trial> out;
    if (!fs::exists(path)) return out;
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    size_t pos = 0;
    int lineno = 0;
    std::map<std::string, size_t> index;
    while (pos < text.size()) {
        const size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) break;
        const std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (lineno == 1) {
            if (line != kLedgerHeader) throw std::runtime_error(path + ": unexpected ledger header");
            continue;
        }
        if (line.empty()) continue;
        Trial t;
        try {
            t = parse_trial(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        auto [it, fresh] = index.emplace(t.key(), out.size());
        if (fresh)
            out.push_back(std::move(t));
        else
            out[it->second] = std::move(t);
    }
    return out;
}

/// Append-only writer; one line per trial, flushed immediately.
class LedgerWriter {
public:
    explicit LedgerWriter(const std::string& path) : path_(path) {
        const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
        if (!fresh) {
            // Drop a torn final line so the next append starts a fresh row.
            std::ifstream in(path, std::ios::binary);
            std::stringstream ss;
            ss << in.rdbuf();
            std::string text = ss.str();
            if (!text.empty() && text.back() != '\n') {
                text.erase(text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1);
                std::ofstream(path, std::ios::binary | std::ios::trunc) << text;
            }
        }
        out_.open(path, std::ios::binary | std::ios::app);
        if (!out_) throw std::runtime_error(path + ": cannot open ledger");
        if (fresh || fs::file_size(path) == 0) out_ << kLedgerHeader << '\n' << std::flush;
    }

    void append(const Trial& t) {
        std::lock_guard lock(mu_);
        out_ << trial_line(t) << '\n' << std::flush;
    }

private:
    std::string path_;
    std::ofstream out_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Running the matrix

struct BenchInputs {
    std::map<std::string, Image> styles;
    std::map<std::string, Image> contents;
    std::map<std::string, coherence::GroundTruth> ground_truth;  // keyed by content id
};

struct BenchOptions {
    transfer::TransferConfig transfer;  // method and weight are set per trial
    std::string dir;                    // ledger.csv and images/ live here
    int threads = 1;
    bool save_images = true;
};

/// Desk-scale optimiser budget: short L-BFGS runs and a shortened GAL schedule.
inline transfer::TransferConfig desk_transfer_config() {
    transfer::TransferConfig c;
    c.iterations = 10;
    c.working_width = 64;
    c.gal.outer_iters = 4;
    c.gal.inner_iters = 5;
    return c;
}

inline std::string image_name(const Trial& t) {
    std::string s = transfer::to_string(t.method) + "_" + t.style_id + "_" + t.content_id + "_w" + format_number(t.weight) +
                    "_s" + std::to_string(t.seed) + ".png";
    for (char& ch : s)
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.')) ch = '-';
    return s;
}

/// One trial: transfer, base statistics and calibrated scores. Errors are
/// recorded in the trial rather than thrown.
inline Trial run_trial(Trial t, const BenchInputs& in, const nn::NetworkSpec& net, const stats::ProjectionBasis& basis,
                       const calibration::Models& models, const BenchOptions& opt) {
    try {
        const Image& style = in.styles.at(t.style_id);
        const Image& content = in.contents.at(t.content_id);
        const auto& gt = in.ground_truth.at(t.content_id);
        transfer::TransferConfig cfg = opt.transfer;
        cfg.method = t.method;
        cfg.style_weight = t.weight;
        cfg.seed = t.seed;
        const auto r = transfer::run_transfer(style, content, net, cfg);
        const Image style_w = resize(style, r.image.height, r.image.width);
        const auto e = stats::base_e(r.image, style_w, net, basis);
        for (int i = 0; i < 5; ++i) t.E[i] = e.at(i);
        const Image out_gt_size = resize(r.image, gt.height, gt.width);
        t.C = coherence::base_c(out_gt_size, gt);
        const auto s = t.stats();
        t.e_score = calibration::score(s, models.e);
        t.c_score = calibration::score(s, models.c);
        for (double v : {t.C, t.e_score, t.c_score})
            if (!std::isfinite(v)) throw std::runtime_error("non-finite score");
        for (double v : t.E)
            if (!std::isfinite(v)) throw std::runtime_error("non-finite E statistic");
        if (opt.save_images && !opt.dir.empty()) {
            t.image = "images/" + image_name(t);
            write_png(r.image, (fs::path(opt.dir) / t.image).string());
        }
        t.error.clear();
    } catch (const std::exception& e) {
        t.E.fill(std::numeric_limits<double>::quiet_NaN());
        t.C = t.e_score = t.c_score = std::numeric_limits<double>::quiet_NaN();
        t.error = e.what();
    }
    return t;
}

struct MatrixRun {
    std::vector<Trial> trials;  // as read back from the ledger, in key order
    int computed = 0;           // trials run in this call
};

inline bool trial_less(const Trial& a, const Trial& b) {
    return std::tie(a.method, a.style_id, a.content_id, a.weight, a.seed) <
           std::tie(b.method, b.style_id, b.content_id, b.weight, b.seed);
}

/// Runs every job not already in dir/ledger.csv and returns the
/// full ledger. Trials whose recorded run failed are retried.
inline MatrixRun run_matrix(const std::vector<Job>& jobs, const nn::NetworkSpec& net,
                            const stats::ProjectionBasis& basis, const calibration::Models& models, const BenchInputs& in,
                            const BenchOptions& opt) {
    if (opt.dir.empty()) throw std::invalid_argument("bench needs an output directory");
    fs::create_directories(fs::path(opt.dir) / "images");
    const std::string ledger = (fs::path(opt.dir) / "ledger.csv").string();
    std::set<std::string> done;
    for (const auto& t : read_ledger(ledger))
        if (t.ok()) done.insert(t.key());

    std::vector<Trial> todo;
    std::set<std::string> queued;
    for (const auto& job : jobs) {
        Trial t;
        t.method = job.method;
        t.style_id = job.triple.style_id;
        t.content_id = job.triple.content_id;
        t.weight = job.triple.weight;
        t.seed = opt.transfer.seed;
        const auto k = t.key();
        if (done.count(k) || !queued.insert(k).second) continue;
        todo.push_back(std::move(t));
    }

    LedgerWriter writer(ledger);
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i = next++; i < todo.size(); i = next++) writer.append(run_trial(todo[i], in, net, basis, models, opt));
    };
    const int n = std::max(1, std::min<int>(opt.threads, static_cast<int>(todo.size())));
    std::vector<std::thread> pool;
    for (int i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    MatrixRun r;
    r.computed = static_cast<int>(todo.size());
    r.trials = read_ledger(ledger);
    std::sort(r.trials.begin(), r.trials.end(), trial_less);
    return r;
}

// ---------------------------------------------------------------------------
// Summaries

/// 66% quantile of chi-square with 2 degrees of freedom: -2 ln(1 - 0.66).
inline double ellipse_radius_sq(double coverage = 0.66) { return -2.0 * std::log1p(-coverage); }

struct MethodSummary {
    Method method = Method::Gatys;
    int n = 0;
    double mean_e = 0.0, mean_c = 0.0;
    double cov_ee = 0.0, cov_ec = 0.0, cov_cc = 0.0;  // 1/(n-1)
    bool admissible = true;
};

inline std::vector<MethodSummary> summarize(const std::vector<Trial>& trials) {
    std::map<Method, std::vector<const Trial*>> by;
    for (const auto& t : trials)
        if (t.ok()) by[t.method].push_back(&t);
    std::vector<MethodSummary> out;
    for (const auto& [m, ts] : by) {
        if (ts.size() < 3) throw std::invalid_argument(transfer::to_string(m) + " has fewer than 3 trials");
        MethodSummary s;
        s.method = m;
        s.n = static_cast<int>(ts.size());
        for (const auto* t : ts) {
            s.mean_e += t->e_score;
            s.mean_c += t->c_score;
        }
        s.mean_e /= s.n;
        s.mean_c /= s.n;
        for (const auto* t : ts) {
            const double de = t->e_score - s.mean_e, dc = t->c_score - s.mean_c;
            s.cov_ee += de * de;
            s.cov_ec += de * dc;
            s.cov_cc += dc * dc;
        }
        s.cov_ee /= s.n - 1;
        s.cov_ec /= s.n - 1;
        s.cov_cc /= s.n - 1;
        out.push_back(s);
    }
    for (auto& s : out)
        for (const auto& o : out)
            if (o.mean_e > s.mean_e && o.mean_c > s.mean_c) s.admissible = false;
    return out;
}

/// Points on the ellipse {x : (x - mean)ᵀ cov⁻¹ (x - mean) = radius_sq}.
inline std::vector<std::pair<double, double>> ellipse_points(const MethodSummary& s, double radius_sq, int count = 64) {
    Eigen::Matrix2d cov;
    cov << s.cov_ee, s.cov_ec, s.cov_ec, s.cov_cc;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
    const Eigen::Vector2d sd = es.eigenvalues().cwiseMax(0.0).cwiseSqrt() * std::sqrt(radius_sq);
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i <= count; ++i) {
        const double a = 2.0 * std::numbers::pi * i / count;
        const Eigen::Vector2d p = es.eigenvectors() * Eigen::Vector2d(sd(0) * std::cos(a), sd(1) * std::sin(a));
        pts.emplace_back(s.mean_e + p(0), s.mean_c + p(1));
    }
    return pts;
}

// ---------------------------------------------------------------------------
// Regressions

inline double two_sided_p(double t, double dof) {
    if (!std::isfinite(t)) return 0.0;
    boost::math::students_t dist(dof);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

struct WeightEffect {
    Method method = Method::Gatys;
    int n = 0;
    double coefficient = 0.0;  // d E-score / d weight
    double effect = 0.0;       // coefficient × mean weight
    double effect_sd = 0.0;    // coefficient × weight standard deviation
    double p_value = 1.0;
};

/// OLS of E-score on weight with intercept; p-value from the slope's t statistic.
inline WeightEffect weight_effect(const std::vector<double>& weights, const std::vector<double>& scores) {
    if (weights.size() != scores.size()) throw std::invalid_argument("weights and scores differ in length");
    const size_t n = weights.size();
    if (n < 3) throw std::invalid_argument("weight regression needs at least 3 trials");
    double mw = 0, ms = 0;
    for (size_t i = 0; i < n; ++i) mw += weights[i], ms += scores[i];
    mw /= n;
    ms /= n;
    double sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxx += (weights[i] - mw) * (weights[i] - mw);
        sxy += (weights[i] - mw) * (scores[i] - ms);
    }
    if (!(sxx > 1e-12 * std::max(1.0, mw * mw) * n)) throw std::invalid_argument("weights are constant");
    WeightEffect w;
    w.n = static_cast<int>(n);
    w.coefficient = sxy / sxx;
    double sse = 0;
    for (size_t i = 0; i < n; ++i) {
        const double r = scores[i] - ms - w.coefficient * (weights[i] - mw);
        sse += r * r;
    }
    const double se = std::sqrt(sse / (n - 2) / sxx);
    w.p_value = se > 0 ? two_sided_p(w.coefficient / se, n - 2.0) : (w.coefficient == 0 ? 1.0 : 0.0);
    w.effect = w.coefficient * mw;
    w.effect_sd = w.coefficient * std::sqrt(sxx / (n - 1));
    return w;
}

inline WeightEffect weight_effect(const std::vector<Trial>& trials, Method m) {
    std::vector<double> w, s;
    for (const auto& t : trials)
        if (t.ok() && t.method == m) w.push_back(t.weight), s.push_back(t.e_score);
    auto r = weight_effect(w, s);
    r.method = m;
    return r;
}

struct StyleCoefficient {
    std::string style_id;
    int n = 0;
    double coefficient = 0.0;  // style mean minus the mean of style means
    double p_value = 1.0;
    bool significant = false;  // p < 0.05
};

/// OLS of score on style indicators under sum-to-zero coding. The model is
/// saturated in styles, so fitted values are the style means.
inline std::vector<StyleCoefficient> style_effect(const std::vector<std::string>& style_ids, const std::vector<double>& scores) {
    if (style_ids.size() != scores.size()) throw std::invalid_argument("styles and scores differ in length");
    std::map<std::string, std::vector<double>> groups;
    for (size_t i = 0; i < scores.size(); ++i) groups[style_ids[i]].push_back(scores[i]);
    const int S = static_cast<int>(groups.size());
    const int n = static_cast<int>(scores.size());
    for (const auto& [s, v] : groups)
        if (v.size() < 2) throw std::invalid_argument("style " + s + " has fewer than 2 trials");
    if (S < 2) throw std::invalid_argument("style regression needs at least 2 styles");
    std::vector<StyleCoefficient> out;
    double grand = 0, sse = 0;
    std::map<std::string, double> means;
    for (const auto& [s, v] : groups) {
        double m = 0;
        for (double x : v) m += x;
        m /= v.size();
        means[s] = m;
        grand += m / S;
        for (double x : v) sse += (x - m) * (x - m);
    }
    const double dof = n - S;
    const double sigma2 = sse / dof;
    double inv_sum = 0;
    for (const auto& [s, v] : groups) inv_sum += 1.0 / v.size();
    for (const auto& [s, v] : groups) {
        StyleCoefficient c;
        c.style_id = s;
        c.n = static_cast<int>(v.size());
        c.coefficient = means[s] - grand;
        const double inv = 1.0 / v.size();
        const double var = sigma2 * ((1.0 - 1.0 / S) * (1.0 - 1.0 / S) * inv + (inv_sum - inv) / (double(S) * S));
        c.p_value = var > 0 ? two_sided_p(c.coefficient / std::sqrt(var), dof) : (c.coefficient == 0 ? 1.0 : 0.0);
        c.significant = c.p_value < 0.05;
        out.push_back(c);
    }
    return out;
}

/// Style coefficients of the E-score for every method in the ledger.
inline std::map<Method, std::vector<StyleCoefficient>> style_effect(const std::vector<Trial>& trials) {
    std::map<Method, std::pair<std::vector<std::string>, std::vector<double>>> by;
    for (const auto& t : trials)
        if (t.ok()) {
            by[t.method].first.push_back(t.style_id);
            by[t.method].second.push_back(t.e_score);
        }
    std::map<Method, std::vector<StyleCoefficient>> out;
    for (const auto& [m, v] : by) out[m] = style_effect(v.first, v.second);
    return out;
}

// ---------------------------------------------------------------------------
// 3 x 3 quantile grid

struct GridCell {
    int e_tertile = 0, c_tertile = 0;  // 0 low .. 2 high
    int total = 0;
    std::vector<std::pair<Method, int>> counts;  // descending by count, then method order
    double percent(size_t i) const { return total ? 100.0 * counts[i].second / total : 0.0; }
};

/// Tertiles by rank of the calibrated scores (ties broken by trial key order).
inline std::vector<GridCell> quantile_grid(const std::vector<Trial>& trials, const calibration::Models& models) {
    std::vector<const Trial*> ok;
    for (const auto& t : trials)
        if (t.ok()) ok.push_back(&t);
    if (ok.size() < 9) throw std::invalid_argument("quantile grid needs at least 9 trials");
    std::sort(ok.begin(), ok.end(), [](const Trial* a, const Trial* b) { return trial_less(*a, *b); });
    const size_t n = ok.size();
    std::vector<double> es(n), cs(n);
    for (size_t i = 0; i < n; ++i) {
        const auto s = ok[i]->stats();
        es[i] = calibration::score(s, models.e);
        cs[i] = calibration::score(s, models.c);
    }
    auto tertiles = [n](const std::vector<double>& v) {
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<int> t(n);
        for (size_t r = 0; r < n; ++r) t[order[r]] = static_cast<int>(3 * r / n);
        return t;
    };
    const auto te = tertiles(es), tc = tertiles(cs);
    std::vector<GridCell> cells(9);
    std::vector<std::map<Method, int>> counts(9);
    for (int e = 0; e < 3; ++e)
        for (int c = 0; c < 3; ++c) cells[e * 3 + c].e_tertile = e, cells[e * 3 + c].c_tertile = c;
    for (size_t i = 0; i < n; ++i) {
        const int k = te[i] * 3 + tc[i];
        ++cells[k].total;
        ++counts[k][ok[i]->method];
    }
    for (int k = 0; k < 9; ++k) {
        cells[k].counts.assign(counts[k].begin(), counts[k].end());
        std::stable_sort(cells[k].counts.begin(), cells[k].counts.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error(p.string() + ": cannot write");
    out << s;
}

inline std::string trials_csv(const std::vector<Trial>& trials) {
    std::string s = kLedgerHeader + '\n';
    for (const auto& t : trials) s += trial_line(t) + '\n';
    return s;
}

inline std::string summary_csv(const std::vector<MethodSummary>& ss) {
    std::string s = "method,n,meanE,meanC,cov_EE,cov_EC,cov_CC,admissible\n";
    for (const auto& m : ss)
        s += transfer::to_string(m.method) + ',' + std::to_string(m.n) + ',' + format_number(m.mean_e) + ',' +
             format_number(m.mean_c) + ',' + format_number(m.cov_ee) + ',' + format_number(m.cov_ec) + ',' +
             format_number(m.cov_cc) + ',' + (m.admissible ? "1" : "0") + '\n';
    return s;
}

inline std::string ellipse_dat(const MethodSummary& m, double radius_sq) {
    std::string s = "# " + transfer::to_string(m.method) + " E C, radius^2 " + format_number(radius_sq) + '\n';
    for (const auto& [e, c] : ellipse_points(m, radius_sq)) s += format_number(e) + ' ' + format_number(c) + '\n';
    return s;
}

struct ReportFiles {
    std::vector<std::string> written;  // file names relative to the report directory
};

/// trials.csv, summary.csv, weight_effect.csv, style_effect.csv,
/// quantile_grid.csv and ellipse files (chi-square 66% and 1-sigma).
/// Analyses that need more trials than exist are skipped with a note in the CSV.
inline ReportFiles write_reports(const std::vector<Trial>& trials_in, const calibration::Models& models,
                                 const std::string& dir) {
    fs::create_directories(dir);
    std::vector<Trial> trials = trials_in;
    std::sort(trials.begin(), trials.end(), trial_less);
    ReportFiles rf;
    auto put = [&](const std::string& name, const std::string& body) {
        write_text(fs::path(dir) / name, body);
        rf.written.push_back(name);
    };
    put("trials.csv", trials_csv(trials));

    std::map<Method, int> ok_count;
    for (const auto& t : trials) ok_count[t.method] += t.ok();
    std::vector<Trial> summarizable;
    for (const auto& t : trials)
        if (ok_count[t.method] >= 3) summarizable.push_back(t);
    const auto ss = summarize(summarizable);
    put("summary.csv", summary_csv(ss));
    for (const auto& m : ss) {
        put("ellipse_" + transfer::to_string(m.method) + ".dat", ellipse_dat(m, ellipse_radius_sq()));
        put("ellipse_" + transfer::to_string(m.method) + "_1sigma.dat", ellipse_dat(m, 1.0));
    }

    std::set<Method> methods;
    for (const auto& t : trials)
        if (t.ok()) methods.insert(t.method);
    std::string we = "method,n,coefficient,effect,effect_sd,p_value,note\n";
    std::string se = "method,style_id,n,coefficient,p_value,significant\n";
    for (Method m : methods) {
        try {
            const auto w = weight_effect(trials, m);
            we += transfer::to_string(m) + ',' + std::to_string(w.n) + ',' + format_number(w.coefficient) + ',' +
                  format_number(w.effect) + ',' + format_number(w.effect_sd) + ',' + format_number(w.p_value) + ",\n";
        } catch (const std::invalid_argument& e) {
            we += transfer::to_string(m) + ",,,,,," + csv_field(e.what()) + '\n';
        }
        std::vector<std::string> ids;
        std::vector<double> sc;
        for (const auto& t : trials)
            if (t.ok() && t.method == m) ids.push_back(t.style_id), sc.push_back(t.e_score);
        try {
            for (const auto& c : style_effect(ids, sc))
                se += transfer::to_string(m) + ',' + csv_field(c.style_id) + ',' + std::to_string(c.n) + ',' +
                      format_number(c.coefficient) + ',' + format_number(c.p_value) + ',' + (c.significant ? "1" : "0") + '\n';
        } catch (const std::invalid_argument&) {
        }
    }
    put("weight_effect.csv", we);
    put("style_effect.csv", se);

    std::string qg = "e_tertile,c_tertile,rank,method,count,percent\n";
    try {
        for (const auto& cell : quantile_grid(trials, models))
            for (size_t i = 0; i < cell.counts.size(); ++i)
                qg += std::to_string(cell.e_tertile) + ',' + std::to_string(cell.c_tertile) + ',' + std::to_string(i + 1) +
                      ',' + transfer::to_string(cell.counts[i].first) + ',' + std::to_string(cell.counts[i].second) + ',' +
                      format_number(cell.percent(i)) + '\n';
    } catch (const std::invalid_argument&) {
    }
    put("quantile_grid.csv", qg);

    return rf;
}

/// pool.json for the study service, written into the bench directory next to
/// images/. Reference images go to refs/. Paths in the file are relative to it.
inline void write_pool(const std::vector<Trial>& trials_in, const BenchInputs& in, const std::string& bench_dir) {
    std::vector<Trial> trials = trials_in;
    std::sort(trials.begin(), trials.end(), trial_less);
    fs::create_directories(fs::path(bench_dir) / "refs");
    nlohmann::json images = nlohmann::json::array(), styles = nlohmann::json::object(), contents = nlohmann::json::object();
    std::set<std::string> used_styles, used_contents;
    for (const auto& t : trials) {
        if (!t.ok() || t.image.empty()) continue;
        const std::string name = image_name(t);
        images.push_back({{"id", name.substr(0, name.size() - 4)},
                          {"path", t.image},
                          {"method", transfer::to_string(t.method)},
                          {"style_id", t.style_id},
                          {"content_id", t.content_id},
                          {"weight", t.weight},
                          {"stats", t.stats()}});
        used_styles.insert(t.style_id);
        used_contents.insert(t.content_id);
    }
    for (const auto& id : used_styles) {
        const std::string rel = "refs/style_" + id + ".png";
        write_png(in.styles.at(id), (fs::path(bench_dir) / rel).string());
        styles[id] = rel;
    }
    for (const auto& id : used_contents) {
        const std::string rel = "refs/content_" + id + ".png";
        write_png(in.contents.at(id), (fs::path(bench_dir) / rel).string());
        contents[id] = rel;
    }
    const nlohmann::json pool = {{"images", images}, {"styles", styles}, {"contents", contents}};
    write_text(fs::path(bench_dir) / "pool.json", pool.dump(1) + '\n');
}

// ---------------------------------------------------------------------------
// Inputs from disk

/// Images in a directory keyed by file stem, PNG/PPM only, sorted by name.
inline std::map<std::string, Image> load_image_dir(const std::string& dir) {
    std::map<std::string, Image> out;
    if (!fs::is_directory(dir)) throw std::runtime_error(dir + ": not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && (e.path().extension() == ".png" || e.path().extension() == ".ppm"))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out[f.stem().string()] = read_image(f.string());
    if (out.empty()) throw std::runtime_error(dir + ": no images");
    return out;
}

inline std::vector<std::string> keys_of(const std::map<std::string, Image>& m) {
    std::vector<std::string> k;
    for (const auto& [id, _] : m) k.push_back(id);
    return k;
}

/// Basis over the style images at the working size.
inline stats::ProjectionBasis style_basis(const BenchInputs& in, const nn::NetworkSpec& net, int working_width) {
    std::vector<Image> corpus;
    int h = std::numeric_limits<int>::max(), w = working_width;
    for (const auto& [id, img] : in.styles) {
        corpus.push_back(resize_to_width(img, working_width));
        h = std::min(h, corpus.back().height);
    }
    const std::vector<std::string> taps(nn::kStyleTaps.begin(), nn::kStyleTaps.end());
    return stats::build_projection_basis(corpus, net, taps, stats::default_dims(net, taps, h, w));
}

inline BenchInputs inputs_from(const fixtures::DeskSet& d) {
    BenchInputs in;
    for (size_t i = 0; i < d.styles.size(); ++i) in.styles[d.style_ids[i]] = d.styles[i];
    for (size_t i = 0; i < d.contents.size(); ++i) {
        in.contents[d.content_ids[i]] = d.contents[i].image;
        in.ground_truth[d.content_ids[i]] = d.contents[i].gt;
    }
    return in;
}

}  // namespace stylecal::harness
