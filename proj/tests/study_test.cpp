#include <stylecal/study.hpp>

#include <gtest/gtest.h>

#include <thread>

#include "test_util.hpp"

using namespace stylecal;
using namespace stylecal::study;
using calibration::ClickRecord;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("stylecal_study_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d / "images");
    fs::create_directories(d / "refs");
    return d;
}

struct Entry {
    std::string style, content;
    std::array<double, 5> e;
};

// Writes a pool directory with small PNGs; ids are img0, img1, ...
fs::path make_pool(const std::string& name, const std::vector<Entry>& entries) {
    const auto dir = fresh_dir(name);
    nlohmann::json images = nlohmann::json::array(), styles = nlohmann::json::object(), contents = nlohmann::json::object();
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& s = entries[i];
        const std::string id = "img" + std::to_string(i);
        write_png(stylecal::testing::random_image(8, 8, i + 1), (dir / "images" / (id + ".png")).string());
        std::map<std::string, double> stats;
        for (int k = 0; k < 5; ++k) stats["E" + std::to_string(k + 1)] = s.e[k];
        stats["C"] = 0.5;
        images.push_back({{"id", id},
                          {"path", "images/" + id + ".png"},
                          {"method", "Gatys"},
                          {"style_id", s.style},
                          {"content_id", s.content},
                          {"weight", 100.0},
                          {"stats", stats}});
        if (!styles.contains(s.style)) {
            write_png(stylecal::testing::random_image(8, 8, 100), (dir / "refs" / ("style_" + s.style + ".png")).string());
            styles[s.style] = "refs/style_" + s.style + ".png";
        }
        if (!contents.contains(s.content)) {
            write_png(stylecal::testing::random_image(8, 8, 200), (dir / "refs" / ("content_" + s.content + ".png")).string());
            contents[s.content] = "refs/content_" + s.content + ".png";
        }
    }
    std::ofstream(dir / "pool.json") << nlohmann::json{{"images", images}, {"styles", styles}, {"contents", contents}}.dump(1);
    return dir;
}

std::vector<Entry> one_cell(int n) {
    std::vector<Entry> v;
    for (int i = 0; i < n; ++i) v.push_back({"s", "c", {double(i), 0, 0, 0, 0}});
    return v;
}

// A study behind a real HTTP server on an ephemeral port.
struct Served {
    Study study;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    Served(const fs::path& pool_dir, std::uint64_t seed, Clock clock = system_millis)
        : study(load_pool(pool_dir.string()), (pool_dir / "clicks.jsonl").string(), seed, std::move(clock)) {
        install_routes(server, study);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~Served() {
        server.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_keep_alive(true);
        return c;
    }
};

nlohmann::json get_pair(httplib::Client& c, const std::string& test, const std::string& session, int expect = 200) {
    auto r = c.Get(("/pair?test=" + test + "&session=" + session).c_str());
    EXPECT_TRUE(r);
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << r->body;
    return nlohmann::json::parse(r->body);
}

int post_click(httplib::Client& c, const std::string& pair_id, const std::string& chosen, const std::string& user) {
    auto r = c.Post("/click", nlohmann::json{{"pair_id", pair_id}, {"chosen", chosen}, {"user_id", user}}.dump(),
                    "application/json");
    EXPECT_TRUE(r);
    return r ? r->status : -1;
}

std::string export_log(httplib::Client& c) {
    auto r = c.Get("/export");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    return r ? r->body : "";
}

size_t lines(const std::string& s) { return static_cast<size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(StudyService, CellOfThreeGivesThreeDistinctPairsThenExhausts) {
    Served s(make_pool("three", one_cell(3)), 1);
    auto c = s.client();
    std::set<std::set<std::string>> seen;
    for (int i = 0; i < 3; ++i) {
        const auto p = get_pair(c, "E", "tok");
        EXPECT_NE(p.at("left_id"), p.at("right_id"));
        seen.insert({p.at("left_id").get<std::string>(), p.at("right_id").get<std::string>()});
    }
    EXPECT_EQ(seen.size(), 3u);
    const auto err = get_pair(c, "E", "tok", 409);
    EXPECT_NE(err.at("error").get<std::string>().find("exhausted"), std::string::npos);
    // Another session starts fresh.
    get_pair(c, "E", "other");
}

TEST(StudyService, PairsShareStyleAndContent) {
    Served s(make_pool("cells", {{"s1", "c1", {1, 0, 0, 0, 0}},
                                 {"s1", "c2", {2, 0, 0, 0, 0}},
                                 {"s2", "c1", {3, 0, 0, 0, 0}},
                                 {"s1", "c1", {4, 0, 0, 0, 0}},
                                 {"s2", "c1", {5, 0, 0, 0, 0}}}),
             2);
    auto c = s.client();
    std::set<std::set<std::string>> seen;
    for (int i = 0; i < 2; ++i) {
        const auto p = get_pair(c, "E", "tok");
        const auto& a = s.study.pool().image(p.at("left_id"));
        const auto& b = s.study.pool().image(p.at("right_id"));
        EXPECT_EQ(a.style_id, b.style_id);
        EXPECT_EQ(a.content_id, b.content_id);
        EXPECT_EQ(p.at("reference_id"), "style-" + a.style_id);
        seen.insert({a.id, b.id});
    }
    EXPECT_EQ(seen, (std::set<std::set<std::string>>{{"img0", "img3"}, {"img2", "img4"}}));
}

TEST(StudyService, CTestWithoutTopQuartilePairsIsAnExplicitError) {
    // Eight images: the top quartile is the two largest sums, which sit in different cells.
    std::vector<Entry> entries;
    for (int i = 0; i < 8; ++i) entries.push_back({"s" + std::to_string(i % 2), "c", {double(i), 0, 0, 0, 0}});
    Served s(make_pool("noelig", entries), 3);
    auto c = s.client();
    const auto err = get_pair(c, "C", "tok", 409);
    EXPECT_NE(err.at("error").get<std::string>().find("no eligible pairs"), std::string::npos);
    get_pair(c, "E", "tok");
}

TEST(StudyService, CTestEligibilityMatchesTheTopQuartileRule) {
    std::vector<Entry> entries;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < 40; ++i)
        entries.push_back({"s" + std::to_string(i % 2), "c" + std::to_string(i % 3), {n(rng), n(rng), n(rng), n(rng), n(rng)}});
    Served s(make_pool("elig", entries), 4);
    std::vector<double> sums;
    for (const auto& sp : entries) sums.push_back(sp.e[0] + sp.e[1] + sp.e[2] + sp.e[3] + sp.e[4]);
    const double thr = calibration::top_quartile_threshold(sums);
    EXPECT_EQ(s.study.c_threshold(), thr);
    // Enumerate every pair the C test will hand one session.
    std::set<std::set<std::string>> served;
    for (;;) {
        try {
            const auto p = s.study.serve_pair("C", "tok");
            EXPECT_EQ(p.reference_id.rfind("content-", 0), 0u);
            served.insert({p.left_id, p.right_id});
        } catch (const StudyError& e) {
            EXPECT_EQ(e.status, 409);
            break;
        }
    }
    std::set<std::set<std::string>> expected;
    for (size_t a = 0; a < entries.size(); ++a)
        for (size_t b = a + 1; b < entries.size(); ++b)
            if (entries[a].style == entries[b].style && entries[a].content == entries[b].content && sums[a] >= thr && sums[b] >= thr)
                expected.insert({"img" + std::to_string(a), "img" + std::to_string(b)});
    EXPECT_FALSE(expected.empty());
    EXPECT_EQ(served, expected);
}

TEST(StudyService, LeftRightOrderIsBalanced) {
    // img1 has the higher E sum; it should be on the left about half the time.
    Served s(make_pool("balance", one_cell(2)), 5);
    auto c = s.client();
    int better_left = 0;
    for (int i = 0; i < 1000; ++i) better_left += get_pair(c, "E", "sess" + std::to_string(i)).at("left_id") == "img1";
    // Binomial(1000, 0.5): sd 15.8, 3 sd bound.
    EXPECT_NEAR(better_left, 500, 48);
}

TEST(StudyService, ValidClickAddsExactlyOneLineAndDuplicatesAreRejected) {
    Served s(make_pool("dup", one_cell(3)), 6);
    auto c = s.client();
    EXPECT_EQ(export_log(c), "");
    const auto p = get_pair(c, "E", "u1");
    EXPECT_EQ(post_click(c, p.at("pair_id"), "left", "u1"), 200);
    const std::string after = export_log(c);
    EXPECT_EQ(lines(after), 1u);
    EXPECT_EQ(post_click(c, p.at("pair_id"), "right", "u1"), 409);
    EXPECT_EQ(export_log(c), after);
    EXPECT_EQ(post_click(c, "p999", "left", "u1"), 404);
    EXPECT_EQ(post_click(c, p.at("pair_id"), "middle", "u2"), 400);
    EXPECT_EQ(export_log(c), after);
    auto bad = c.Post("/click", "{not json", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
    EXPECT_EQ(export_log(c), after);
}

TEST(StudyService, BadRequestsAreRejected) {
    Served s(make_pool("bad", one_cell(2)), 7);
    auto c = s.client();
    get_pair(c, "X", "tok", 400);
    get_pair(c, "E", "", 400);
    auto r = c.Get("/img/nothing");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
}

TEST(StudyService, ImagesAreServedAsPng) {
    const auto dir = make_pool("img", one_cell(2));
    Served s(dir, 8);
    auto c = s.client();
    const auto p = get_pair(c, "E", "tok");
    for (const std::string key : {"left_url", "right_url", "reference_url"}) {
        auto r = c.Get(p.at(key).get<std::string>().c_str());
        ASSERT_TRUE(r);
        EXPECT_EQ(r->status, 200);
        EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
        EXPECT_EQ(r->body.substr(0, 4), "\x89PNG");
    }
    std::ifstream f(dir / "images" / "img0.png", std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    EXPECT_EQ(c.Get("/img/img0")->body, ss.str());
}

TEST(StudyService, ExportRoundTripsThroughTheClickReader) {
    std::int64_t now = 1000;
    Served s(make_pool("export", one_cell(4)), 9, [&now] { return now += 7; });
    auto c = s.client();
    std::vector<ClickRecord> expected;
    for (int i = 0; i < 6; ++i) {
        const auto p = get_pair(c, "E", "u");
        auto r = c.Post("/click", nlohmann::json{{"pair_id", p.at("pair_id")}, {"chosen", i % 2 ? "left" : "right"}, {"user_id", "u"}}.dump(),
                        "application/json");
        ASSERT_EQ(r->status, 200);
        expected.push_back(nlohmann::json::parse(r->body).at("record").get<ClickRecord>());
        EXPECT_EQ(expected.back().timestamp, 1007 + 7 * i);
        EXPECT_EQ(expected.back().left_id, p.at("left_id"));
    }
    std::istringstream in(export_log(c));
    EXPECT_EQ(calibration::parse_clicks(in), expected);
    EXPECT_EQ(export_log(c), export_log(c));
}

TEST(StudyService, RestartKeepsDuplicateRejectionAndPairIds) {
    const auto dir = make_pool("restart", one_cell(3));
    std::string first_id;
    {
        Served s(dir, 10);
        auto c = s.client();
        first_id = get_pair(c, "E", "u").at("pair_id");
        ASSERT_EQ(post_click(c, first_id, "left", "u"), 200);
    }
    Served s(dir, 10);
    auto c = s.client();
    EXPECT_EQ(post_click(c, first_id, "left", "u"), 409);
    EXPECT_NE(get_pair(c, "E", "v").at("pair_id"), first_id);
    EXPECT_EQ(lines(export_log(c)), 1u);
}

TEST(StudyService, HundredSessionsFeedTheLogisticFit) {
    // Simulated raters prefer the image with larger E1 (planted unit weight on E1).
    std::vector<Entry> entries;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int i = 0; i < 30; ++i) entries.push_back({"s" + std::to_string(i % 3), "c", {2 * n(rng), n(rng), n(rng), n(rng), n(rng)}});
    const auto dir = make_pool("hundred", entries);
    Served s(dir, 12);
    auto c = s.client();
    const auto stats = s.study.pool().image_stats();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 100; ++k) {
        const std::string session = "session" + std::to_string(k);
        const auto p = get_pair(c, "E", session);
        const double dl = stats.at(p.at("left_id")).at("E1") - stats.at(p.at("right_id")).at("E1");
        const std::string choice = u(rng) < calibration::sigmoid(dl) ? "left" : "right";
        ASSERT_EQ(post_click(c, p.at("pair_id"), choice, session), 200);
    }
    std::istringstream in(export_log(c));
    const auto clicks = calibration::parse_clicks(in);
    ASSERT_EQ(clicks.size(), 100u);
    const auto pairs = calibration::pairs_from_clicks(clicks, stats, "E");
    ASSERT_EQ(pairs.size(), 100u);
    const auto fit = calibration::fit_pairwise_logistic(calibration::select_features(pairs, {0}));
    EXPECT_GT(fit.theta(0), 0.0);
}

TEST(StudyService, ScriptedSessionTwentyPairsNoDuplicateRecords) {
    std::vector<Entry> entries;
    for (int i = 0; i < 24; ++i) entries.push_back({"s" + std::to_string(i % 4), "c" + std::to_string(i % 2), {double(i), 0, 0, 0, 0}});
    Served s(make_pool("scripted", entries), 13);
    auto c = s.client();
    std::set<std::string> pair_ids;
    for (int i = 0; i < 20; ++i) {
        const auto p = get_pair(c, "E", "rater");
        pair_ids.insert(p.at("pair_id"));
        EXPECT_EQ(post_click(c, p.at("pair_id"), "left", "rater"), 200);
        EXPECT_EQ(post_click(c, p.at("pair_id"), "left", "rater"), 409);  // double-click
    }
    EXPECT_EQ(pair_ids.size(), 20u);
    std::istringstream in(export_log(c));
    const auto clicks = calibration::parse_clicks(in);
    ASSERT_EQ(clicks.size(), 20u);
    std::set<std::string> logged;
    for (const auto& r : clicks) logged.insert(r.pair_id);
    EXPECT_EQ(logged, pair_ids);
    const auto pairs = calibration::pairs_from_clicks(clicks, s.study.pool().image_stats(), "E");
    EXPECT_NO_THROW(calibration::fit_pairwise_logistic(pairs));
}

TEST(StudyService, ConcurrentClicksAreSerialised) {
    std::vector<Entry> entries;
    for (int i = 0; i < 12; ++i) entries.push_back({"s", "c", {double(i), 0, 0, 0, 0}});
    Served s(make_pool("concurrent", entries), 14);
    std::vector<std::string> ids;
    for (int i = 0; i < 60; ++i) ids.push_back(s.study.serve_pair("E", "tok").pair_id);
    std::vector<std::thread> ts;
    for (int t = 0; t < 4; ++t)
        ts.emplace_back([&, t] {
            auto c = s.client();
            for (int i = t; i < 60; i += 4) post_click(c, ids[i], "left", "u");
            for (int i = 0; i < 60; i += 7) post_click(c, ids[i], "right", "u");  // mostly duplicates
        });
    for (auto& t : ts) t.join();
    std::istringstream in(s.study.export_clicks());
    const auto clicks = calibration::parse_clicks(in);
    EXPECT_EQ(clicks.size(), 60u);
    std::set<std::string> unique;
    for (const auto& r : clicks) unique.insert(r.pair_id);
    EXPECT_EQ(unique.size(), 60u);
}
