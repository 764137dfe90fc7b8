#include <gtest/gtest.h>

#include <httplib.h>

#include <thread>

#include "test_util.hpp"
#include "uga/service.hpp"

namespace uga {
namespace {

/// A prepared run directory with a trained baseline, optionally ranked, and a
/// service listening on an ephemeral port.
class ServiceFixture : public ::testing::Test {
protected:
    void start(bool ranked, int retrain_steps = 6) {
        auto config = test::tiny_config();
        config.retrain.steps = retrain_steps;
        const RunDir run{dir_.path()};
        stage_generate_data(config, run);
        stage_train_baseline(run);
        if (ranked) stage_rank(run);
        service_ = std::make_unique<ReviewService>(dir_.path());
        port_ = service_->bind_any();
        ASSERT_GT(port_, 0);
        thread_ = std::thread([this] { service_->listen(); });
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
        for (int i = 0; i < 200 && !service_->server().is_running(); ++i)
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }

    void TearDown() override {
        if (service_) {
            service_->wait_for_retrain();
            service_->stop();
        }
        if (thread_.joinable()) thread_.join();
        client_.reset();
        service_.reset();
    }

    json get_json(const std::string& path, int expect = 200) {
        auto res = client_->Get(path);
        EXPECT_TRUE(res);
        if (!res) return {};
        EXPECT_EQ(res->status, expect) << path << ": " << res->body;
        return json::parse(res->body);
    }

    httplib::Result post_json(const std::string& path, const json& body) {
        return client_->Post(path, body.dump(), "application/json");
    }

    std::string first_id() { return get_json("/api/queue?limit=1").at(0).at("id").get<std::string>(); }

    test::TempDir dir_{"uga_service"};
    std::unique_ptr<ReviewService> service_;
    std::unique_ptr<httplib::Client> client_;
    std::thread thread_;
    int port_ = 0;
};

TEST_F(ServiceFixture, QueueBeforeRankingIsConflict) {
    start(false);
    auto res = client_->Get("/api/queue");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 409);
    EXPECT_NE(res->body.find("rank"), std::string::npos);
}

TEST_F(ServiceFixture, QueueOrderMatchesRankingFile) {
    start(true);
    const json queue = get_json("/api/queue");
    const json ranking = read_json_file(dir_ / "rankings/ranking.json");
    ASSERT_EQ(queue.size(), ranking.size());
    // global order: descending key, ties by id
    for (std::size_t i = 1; i < queue.size(); ++i) {
        const double a = queue[i - 1].at("mean").get<double>(), b = queue[i].at("mean").get<double>();
        EXPECT_TRUE(a > b || (a == b && queue[i - 1].at("id").get<std::string>() < queue[i].at("id").get<std::string>()));
    }
    // per center, the queue preserves the ranking file's order
    std::map<int, std::vector<std::string>> from_queue, from_file;
    for (const auto& e : queue) from_queue[e.at("center").get<int>()].push_back(e.at("id").get<std::string>());
    for (const auto& e : ranking)
        from_file[e.at("center").get<int>()].push_back(
            patch_id(e.at("slide_id").get<std::string>(), {e.at("x").get<int>(), e.at("y").get<int>()}));
    EXPECT_EQ(from_queue, from_file);
    EXPECT_EQ(queue[0].at("review_status"), "pending");
    EXPECT_EQ(queue[0].at("size"), 16);

    EXPECT_EQ(get_json("/api/queue?limit=3").size(), 3u);
    for (const auto& e : get_json("/api/queue?center=2")) EXPECT_EQ(e.at("center"), 2);
    EXPECT_EQ(client_->Get("/api/queue?limit=abc")->status, 400);
}

TEST_F(ServiceFixture, PatchImagesAndNotFound) {
    start(true);
    const std::string id = first_id();
    for (const char* kind : {"image", "heatmap", "prediction"}) {
        auto res = client_->Get("/api/patch/" + id + "/" + kind);
        ASSERT_TRUE(res);
        ASSERT_EQ(res->status, 200) << kind;
        EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
        EXPECT_EQ(res->body.substr(1, 3), "PNG");
        const auto etag = res->get_header_value("ETag");
        ASSERT_FALSE(etag.empty());
        auto again = client_->Get("/api/patch/" + id + "/" + kind, {{"If-None-Match", etag}});
        EXPECT_EQ(again->status, 304) << kind;
    }
    const auto img = png::decode(reinterpret_cast<const std::uint8_t*>(client_->Get("/api/patch/" + id + "/image")->body.data()),
                                 client_->Get("/api/patch/" + id + "/image")->body.size());
    EXPECT_EQ(img.width, 16);
    EXPECT_EQ(img.channels, 3);
    const auto heat = client_->Get("/api/patch/" + id + "/heatmap")->body;
    EXPECT_EQ(png::decode(reinterpret_cast<const std::uint8_t*>(heat.data()), heat.size()).channels, 4);

    EXPECT_EQ(client_->Get("/api/patch/nope_x0_y0/image")->status, 404);
    EXPECT_EQ(client_->Get("/api/patch/" + id + "/correction")->status, 404);
    EXPECT_EQ(post_json("/api/patch/nope_x0_y0/skip", json::object())->status, 404);
}

TEST_F(ServiceFixture, CorrectionRoundTripIsBitExact) {
    start(true);
    const std::string id = first_id();
    Mask m(16, 16);
    Rng rng(3);
    for (auto& v : m.data) v = rng.bernoulli(0.3) ? 1 : 0;
    const auto png_bytes = png::encode(png::from_mask(m));
    auto res = post_json("/api/patch/" + id + "/correction", {{"png_base64", base64::encode(png_bytes)}});
    ASSERT_EQ(res->status, 200) << res->body;
    EXPECT_FALSE(json::parse(res->body).at("overwrite").get<bool>());

    auto got = client_->Get("/api/patch/" + id + "/correction");
    ASSERT_EQ(got->status, 200);
    EXPECT_EQ(png::to_mask(png::decode(reinterpret_cast<const std::uint8_t*>(got->body.data()), got->body.size())), m);

    // RLE overwrite, last write wins, both writes audited
    Mask other(16, 16);
    other.at(5, 5) = 1;
    res = post_json("/api/patch/" + id + "/correction", {{"rle", mask_to_rle(other)}});
    ASSERT_EQ(res->status, 200);
    EXPECT_TRUE(json::parse(res->body).at("overwrite").get<bool>());
    got = client_->Get("/api/patch/" + id + "/correction");
    EXPECT_EQ(png::to_mask(png::decode(reinterpret_cast<const std::uint8_t*>(got->body.data()), got->body.size())), other);
    const std::string audit = test::file_text(dir_ / "review/audit.jsonl");
    EXPECT_EQ(std::count(audit.begin(), audit.end(), '\n'), 2);

    bool found = false;
    for (const auto& e : get_json("/api/queue"))
        if (e.at("id") == id) {
            EXPECT_EQ(e.at("review_status"), "corrected");
            found = true;
        }
    EXPECT_TRUE(found);

    // corrected patches cannot be skipped
    EXPECT_EQ(post_json("/api/patch/" + id + "/skip", json::object())->status, 409);
}

TEST_F(ServiceFixture, MalformedCorrectionsAreRejected) {
    start(true);
    const std::string id = first_id();
    const auto small = png::encode(png::from_mask(Mask(8, 8)));
    auto res = post_json("/api/patch/" + id + "/correction", {{"png_base64", base64::encode(small)}});
    EXPECT_EQ(res->status, 400);
    EXPECT_NE(res->body.find("8x8"), std::string::npos);
    EXPECT_EQ(post_json("/api/patch/" + id + "/correction", {{"png_base64", "!!!"}})->status, 400);
    EXPECT_EQ(post_json("/api/patch/" + id + "/correction", json::object())->status, 400);
    EXPECT_EQ(client_->Post("/api/patch/" + id + "/correction", "not json", "application/json")->status, 400);
    json rle = mask_to_rle(Mask(16, 16));
    rle["counts"] = {10};
    EXPECT_EQ(post_json("/api/patch/" + id + "/correction", {{"rle", rle}})->status, 400);
    EXPECT_FALSE(std::filesystem::exists(dir_ / "review/audit.jsonl"));
}

TEST_F(ServiceFixture, SkipMarksPatch) {
    start(true);
    const std::string id = first_id();
    auto res = post_json("/api/patch/" + id + "/skip", json::object());
    ASSERT_EQ(res->status, 200);
    EXPECT_EQ(get_json("/api/queue?limit=1").at(0).at("review_status"), "skipped");
    EXPECT_EQ(read_json_file(dir_ / "review/status.json").at(id), "skipped");
}

TEST_F(ServiceFixture, RetrainAppendsOneMetricsRound) {
    start(true, 3000);
    EXPECT_EQ(post_json("/api/retrain", json::object())->status, 409); // nothing corrected yet
    const json before = get_json("/api/metrics");
    ASSERT_EQ(before.at("rounds").size(), 1u);
    EXPECT_EQ(before.at("rounds").at(0).at("model"), "baseline");

    const json queue = get_json("/api/queue?limit=2");
    for (const auto& e : queue) {
        Mask m(16, 16);
        m.at(8, 8) = 1;
        ASSERT_EQ(post_json("/api/patch/" + e.at("id").get<std::string>() + "/correction", {{"rle", mask_to_rle(m)}})->status,
                  200);
    }
    auto res = post_json("/api/retrain", json::object());
    ASSERT_EQ(res->status, 202);
    EXPECT_EQ(json::parse(res->body).at("job_id"), 1);
    EXPECT_EQ(post_json("/api/retrain", json::object())->status, 409); // already running
    service_->wait_for_retrain();

    const json status = get_json("/api/retrain/status");
    EXPECT_EQ(status.at("state"), "done") << status.dump();
    EXPECT_EQ(status.at("model"), "review_r1");
    EXPECT_EQ(status.at("corrections_used").size(), 2u);

    const json after = get_json("/api/metrics");
    ASSERT_EQ(after.at("rounds").size(), 2u);
    EXPECT_EQ(after.at("rounds").at(1).at("model"), "review_r1");
    EXPECT_TRUE(after.at("rounds").at(1).at("report").contains("per_class"));

    // corrected patches leave the refreshed queue
    for (const auto& e : get_json("/api/queue"))
        for (const auto& c : queue) EXPECT_NE(e.at("id"), c.at("id"));
    EXPECT_EQ(load_model(dir_ / "models/review_r1").parent_id, load_model(dir_ / "models/baseline").id());
}

TEST(ServiceCodec, Base64AndRle) {
    const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 251, 252, 7};
    for (std::size_t n = 0; n <= bytes.size(); ++n) {
        const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
        EXPECT_EQ(base64::decode(base64::encode(part)), part);
    }
    EXPECT_EQ(base64::encode({'M', 'a', 'n'}), "TWFu");
    Mask m(3, 4);
    m.at(0, 0) = 1;
    m.at(1, 2) = m.at(1, 3) = m.at(2, 0) = 1;
    const json rle = mask_to_rle(m);
    EXPECT_EQ(rle.at("counts"), json({0, 1, 5, 3, 3}));
    EXPECT_EQ(mask_from_rle(rle), m);
}

} // namespace
} // namespace uga
