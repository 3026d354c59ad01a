#pragma once

// Pairwise logistic calibration of base statistics against preference clicks.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylecal::calibration {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Click log

struct ClickRecord {
    std::string pair_id;
    std::string test;  // "E" or "C"
    std::string left_id;
    std::string right_id;
    std::string chosen;  // "left" or "right"
    std::string user_id;
    std::int64_t timestamp = 0;  // ms since epoch

    void validate() const {
        if (test != "E" && test != "C") throw std::invalid_argument("click test must be E or C, got '" + test + "'");
        if (chosen != "left" && chosen != "right")
            throw std::invalid_argument("click choice must be left or right, got '" + chosen + "'");
        if (left_id == right_id) throw std::invalid_argument("click compares an image with itself: " + left_id);
    }

    const std::string& chosen_id() const { return chosen == "left" ? left_id : right_id; }

    bool operator==(const ClickRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const ClickRecord& r) {
    j = nlohmann::json{{"pair_id", r.pair_id}, {"test", r.test},       {"left_id", r.left_id},
                       {"right_id", r.right_id}, {"chosen", r.chosen}, {"user_id", r.user_id},
                       {"timestamp", r.timestamp}};
}

inline void from_json(const nlohmann::json& j, ClickRecord& r) {
    j.at("pair_id").get_to(r.pair_id);
    j.at("test").get_to(r.test);
    j.at("left_id").get_to(r.left_id);
    j.at("right_id").get_to(r.right_id);
    j.at("chosen").get_to(r.chosen);
    j.at("user_id").get_to(r.user_id);
    j.at("timestamp").get_to(r.timestamp);
}

/// One compact JSON object, no trailing newline.
inline std::string click_line(const ClickRecord& r) { return nlohmann::json(r).dump(); }

/// JSON Lines. Blank lines are skipped and unknown fields ignored; a malformed
/// or invalid record throws with its line number.
inline std::vector<ClickRecord> parse_clicks(std::istream& in) {
    std::vector<ClickRecord> out;
    std::string line;
    for (size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            ClickRecord r = nlohmann::json::parse(line).get<ClickRecord>();
            r.validate();
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error("click log line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<ClickRecord> read_clicks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    return parse_clicks(in);
}

inline void write_clicks(const std::vector<ClickRecord>& clicks, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    for (const auto& c : clicks) out << click_line(c) << '\n';
    if (!out) throw std::runtime_error(path + ": write failed");
}

// ---------------------------------------------------------------------------
// Model

struct Pair {
    Vector x1, x2;
    int y1 = 0;  // 1 when the first image was preferred
};

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Probability the first image is preferred: e^s1 / (e^s1 + e^s2).
inline double pref_prob(double s1, double s2) { return sigmoid(s1 - s2); }

/// log sigma(z), stable for large |z|.
inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

inline constexpr double kRidge = 1e-6;

struct Fit {
    Vector theta;
    int iterations = 0;
    double objective = 0.0;  // mean log-likelihood minus the ridge penalty
    std::vector<double> trace;  // objective after each accepted step, starting at theta = 0
};

/// Mean log-likelihood of the paired-difference model minus (ridge/2)|theta|^2.
inline double pairwise_objective(const std::vector<Pair>& pairs, const Vector& theta, double ridge = kRidge) {
    double ll = 0.0;
    for (const auto& p : pairs) {
        const double z = theta.dot(p.x1 - p.x2);
        ll += p.y1 ? log_sigmoid(z) : log_sigmoid(-z);
    }
    return ll / pairs.size() - 0.5 * ridge * theta.squaredNorm();
}

/// Damped Newton ascent. Stops when the gradient's max-norm drops below 1e-9
/// or the Newton decrement drops to objective round-off.
inline Fit fit_pairwise_logistic(const std::vector<Pair>& pairs, double ridge = kRidge, int max_iter = 200) {
    if (pairs.empty()) throw std::invalid_argument("fit needs at least one pair");
    const Eigen::Index d = pairs.front().x1.size();
    Matrix D(static_cast<Eigen::Index>(pairs.size()), d);
    Vector y(D.rows());
    for (size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].x1.size() != d || pairs[i].x2.size() != d)
            throw std::invalid_argument("pair feature vectors differ in length");
        D.row(static_cast<Eigen::Index>(i)) = (pairs[i].x1 - pairs[i].x2).transpose();
        y(static_cast<Eigen::Index>(i)) = pairs[i].y1 ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(pairs.size());
    Fit f;
    f.theta = Vector::Zero(d);
    f.objective = pairwise_objective(pairs, f.theta, ridge);
    f.trace.push_back(f.objective);
    for (f.iterations = 0; f.iterations < max_iter; ++f.iterations) {
        const Vector z = D * f.theta;
        const Vector p = z.unaryExpr([](double v) { return sigmoid(v); });
        const Vector grad = D.transpose() * (y - p) / n - ridge * f.theta;
        if (grad.lpNorm<Eigen::Infinity>() < 1e-9) return f;
        const Vector w = p.array() * (1.0 - p.array());
        Matrix H = D.transpose() * w.asDiagonal() * D / n;
        H.diagonal().array() += ridge;
        const Vector step = H.ldlt().solve(grad);
        // Newton decrement: the attainable gain is below objective round-off.
        if (grad.dot(step) < 64 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(f.objective))) return f;
        double t = 1.0;
        for (int k = 0; k < 60; ++k, t *= 0.5) {
            const Vector cand = f.theta + t * step;
            const double obj = pairwise_objective(pairs, cand, ridge);
            if (obj >= f.objective) {
                f.theta = cand;
                f.objective = obj;
                f.trace.push_back(obj);
                break;
            }
        }
    }
    throw std::runtime_error("pairwise logistic fit did not converge in " + std::to_string(max_iter) + " iterations");
}

/// Keeps only the listed feature indices of every pair.
inline std::vector<Pair> select_features(const std::vector<Pair>& pairs, const std::vector<int>& idx) {
    std::vector<Pair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        Pair q;
        q.x1.resize(static_cast<Eigen::Index>(idx.size()));
        q.x2.resize(q.x1.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            q.x1(static_cast<Eigen::Index>(k)) = p.x1(idx[k]);
            q.x2(static_cast<Eigen::Index>(k)) = p.x2(idx[k]);
        }
        q.y1 = p.y1;
        out.push_back(std::move(q));
    }
    return out;
}

struct CvResult {
    double accuracy = 0.0;
    double stderr_ = 0.0;
    std::vector<double> fold_accuracy;
    std::vector<int> single_class_folds;  // folds whose training labels were all one side
};

inline constexpr int kFolds = 10;

/// k-fold accuracy of predicting the chosen side (p > 1/2; p = 1/2 scores 0.5).
/// Pairs are shuffled with the seed, then dealt round-robin into folds.
inline CvResult cross_validate(const std::vector<Pair>& pairs, int k = kFolds, std::uint64_t seed = 1) {
    if (k < 2) throw std::invalid_argument("cross-validation needs at least 2 folds");
    if (pairs.size() < static_cast<size_t>(k))
        throw std::invalid_argument("cross-validation needs at least as many pairs as folds");
    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    CvResult r;
    for (int f = 0; f < k; ++f) {
        std::vector<Pair> train, test;
        for (size_t i = 0; i < order.size(); ++i) (static_cast<int>(i % k) == f ? test : train).push_back(pairs[order[i]]);
        const bool all1 = std::all_of(train.begin(), train.end(), [](const Pair& p) { return p.y1 == 1; });
        const bool all0 = std::all_of(train.begin(), train.end(), [](const Pair& p) { return p.y1 == 0; });
        if (all1 || all0) r.single_class_folds.push_back(f);
        const Vector theta = fit_pairwise_logistic(train).theta;
        double correct = 0.0;
        for (const auto& p : test) {
            const double prob = pref_prob(theta.dot(p.x1), theta.dot(p.x2));
            if (prob == 0.5)
                correct += 0.5;
            else if ((prob > 0.5) == (p.y1 == 1))
                correct += 1.0;
        }
        r.fold_accuracy.push_back(correct / test.size());
    }
    const double mean = std::accumulate(r.fold_accuracy.begin(), r.fold_accuracy.end(), 0.0) / k;
    double ss = 0.0;
    for (double a : r.fold_accuracy) ss += (a - mean) * (a - mean);
    r.accuracy = mean;
    r.stderr_ = std::sqrt(ss / (k - 1)) / std::sqrt(static_cast<double>(k));
    return r;
}

// ---------------------------------------------------------------------------
// Model selection

inline const std::vector<std::string> kFeatureNames = {"E1", "E2", "E3", "E4", "E5", "C"};

struct CalibratedModel {
    std::vector<std::string> feature_names;
    std::vector<double> theta;
    bool admissible = false;
    double cv_accuracy = 0.0;
    double cv_stderr = 0.0;
    int r = 0;  // number of base E statistics used

    bool operator==(const CalibratedModel&) const = default;
};

inline void to_json(nlohmann::json& j, const CalibratedModel& m) {
    j = nlohmann::json{{"features", m.feature_names}, {"theta", m.theta},         {"admissible", m.admissible},
                       {"cv_accuracy", m.cv_accuracy}, {"cv_stderr", m.cv_stderr}, {"r", m.r}};
}

inline void from_json(const nlohmann::json& j, CalibratedModel& m) {
    j.at("features").get_to(m.feature_names);
    j.at("theta").get_to(m.theta);
    if (m.theta.size() != m.feature_names.size()) throw std::invalid_argument("model has mismatched features and theta");
    m.admissible = j.value("admissible", std::all_of(m.theta.begin(), m.theta.end(), [](double t) { return t > 0; }));
    m.cv_accuracy = j.value("cv_accuracy", 0.0);
    m.cv_stderr = j.value("cv_stderr", 0.0);
    m.r = j.value("r", 0);
}

/// Unit weights on E1..Er; the fallback before any clicks exist.
inline CalibratedModel unit_model(std::vector<std::string> features) {
    CalibratedModel m;
    m.theta.assign(features.size(), 1.0);
    m.r = static_cast<int>(std::count_if(features.begin(), features.end(), [](const auto& f) { return f[0] == 'E'; }));
    m.feature_names = std::move(features);
    m.admissible = true;
    return m;
}

/// s = theta . x over the model's features.
inline double score(const std::map<std::string, double>& stats, const CalibratedModel& m) {
    double s = 0.0;
    for (size_t i = 0; i < m.feature_names.size(); ++i) {
        auto it = stats.find(m.feature_names[i]);
        if (it == stats.end()) throw std::invalid_argument("statistics lack feature " + m.feature_names[i]);
        s += m.theta[i] * it->second;
    }
    return s;
}

/// The candidate feature sets for a family, smallest first.
inline std::vector<std::vector<std::string>> candidate_features(const std::string& family) {
    std::vector<std::vector<std::string>> out;
    if (family == "C") out.push_back({"C"});
    else if (family != "E") throw std::invalid_argument("model family must be E or C");
    for (int r = 1; r <= 5; ++r) {
        std::vector<std::string> f;
        if (family == "C") f.push_back("C");
        for (int k = 1; k <= r; ++k) f.push_back("E" + std::to_string(k));
        out.push_back(std::move(f));
    }
    return out;
}

struct Selection {
    CalibratedModel chosen;
    std::vector<CalibratedModel> candidates;
};

class NoAdmissibleModel : public std::runtime_error {
public:
    explicit NoAdmissibleModel(std::vector<CalibratedModel> c)
        : std::runtime_error(describe(c)), candidates(std::move(c)) {}
    std::vector<CalibratedModel> candidates;

private:
    static std::string describe(const std::vector<CalibratedModel>& c) {
        std::ostringstream os;
        os << "no admissible model among " << c.size() << " candidates:";
        for (const auto& m : c) {
            os << " [";
            for (size_t i = 0; i < m.theta.size(); ++i) os << (i ? " " : "") << m.feature_names[i] << "=" << m.theta[i];
            os << " acc=" << m.cv_accuracy << "]";
        }
        return os.str();
    }
};

/// Fits every candidate of the family on pairs whose features follow
/// kFeatureNames order. Among admissible candidates (all weights > 0), those
/// within two pooled standard errors of the most accurate are tied, and the
/// tie goes to the larger model.
inline Selection select_model(const std::vector<Pair>& pairs, const std::string& family, int k = kFolds,
                              std::uint64_t seed = 1) {
    Selection s;
    for (const auto& feats : candidate_features(family)) {
        std::vector<int> idx;
        for (const auto& f : feats)
            idx.push_back(static_cast<int>(std::find(kFeatureNames.begin(), kFeatureNames.end(), f) - kFeatureNames.begin()));
        const auto sub = select_features(pairs, idx);
        CalibratedModel m;
        m.feature_names = feats;
        const Vector theta = fit_pairwise_logistic(sub).theta;
        m.theta.assign(theta.data(), theta.data() + theta.size());
        m.admissible = std::all_of(m.theta.begin(), m.theta.end(), [](double t) { return t > 0; });
        m.r = static_cast<int>(feats.size()) - (family == "C" ? 1 : 0);
        if (sub.size() >= static_cast<size_t>(k)) {
            const auto cv = cross_validate(sub, k, seed);
            m.cv_accuracy = cv.accuracy;
            m.cv_stderr = cv.stderr_;
        }
        s.candidates.push_back(std::move(m));
    }
    const CalibratedModel* best = nullptr;
    for (const auto& m : s.candidates)
        if (m.admissible && (!best || m.cv_accuracy > best->cv_accuracy)) best = &m;
    if (!best) throw NoAdmissibleModel(s.candidates);
    const CalibratedModel* pick = best;
    for (const auto& m : s.candidates) {
        if (!m.admissible || m.r <= pick->r) continue;
        const double pooled = std::sqrt(best->cv_stderr * best->cv_stderr + m.cv_stderr * m.cv_stderr);
        if (m.cv_accuracy >= best->cv_accuracy - 2.0 * pooled) pick = &m;
    }
    s.chosen = *pick;
    return s;
}

// ---------------------------------------------------------------------------
// Pairs from clicks

using ImageStats = std::map<std::string, std::map<std::string, double>>;

inline Vector feature_vector(const std::map<std::string, double>& stats) {
    Vector x(static_cast<Eigen::Index>(kFeatureNames.size()));
    for (size_t i = 0; i < kFeatureNames.size(); ++i) {
        auto it = stats.find(kFeatureNames[i]);
        x(static_cast<Eigen::Index>(i)) = it == stats.end() ? 0.0 : it->second;
    }
    return x;
}

/// Pairs for one test kind; clicks on images without statistics are an error.
inline std::vector<Pair> pairs_from_clicks(const std::vector<ClickRecord>& clicks, const ImageStats& stats,
                                           const std::string& test) {
    std::vector<Pair> out;
    for (const auto& c : clicks) {
        if (c.test != test) continue;
        auto l = stats.find(c.left_id), r = stats.find(c.right_id);
        if (l == stats.end() || r == stats.end())
            throw std::invalid_argument("click " + c.pair_id + " references an image without statistics");
        out.push_back({feature_vector(l->second), feature_vector(r->second), c.chosen == "left" ? 1 : 0});
    }
    return out;
}

/// The ceil(n/4)-th largest value: a value is in the top quartile when at least this.
inline double top_quartile_threshold(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("top quartile of an empty pool");
    std::sort(values.begin(), values.end(), std::greater<>());
    const size_t k = (values.size() + 3) / 4;
    return values[k - 1];
}

// ---------------------------------------------------------------------------
// Scoring models for the bench

struct Models {
    CalibratedModel e, c;
};

/// Used until a calibration run has produced models.
inline Models default_models() { return {unit_model({"E1", "E2", "E3"}), unit_model({"C"})}; }

inline void save_models(const Models& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot write");
    out << nlohmann::json{{"E", m.e}, {"C", m.c}}.dump(2) << '\n';
}

inline Models load_models(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    try {
        const auto j = nlohmann::json::parse(in);
        return {j.at("E").get<CalibratedModel>(), j.at("C").get<CalibratedModel>()};
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

}  // namespace stylecal::calibration
