#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "regrasp/candidate_refiner.hpp"
#include "regrasp/fixture_scorer.hpp"
#include "regrasp/vlm_interface.hpp"
#include "regrasp/vlm_remote.hpp"

using namespace regrasp;
using namespace regrasp::vlm;

namespace {

std::string read_file(const std::string& rel) {
  std::ifstream is(std::string(REGRASP_TEST_DATA) + "/" + rel, std::ios::binary);
  EXPECT_TRUE(is.good()) << rel;
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::InvalidArgument;
}

// 3x5 digit bitmaps, rows top to bottom, "#" = ink.
const std::map<std::string, int> kGlyphs = {
    {"####.##.##.####", 0}, {".#.##..#..#.###", 1}, {"###..#####..###", 2}, {"###..####..####", 3},
    {"#.##.####..#..#", 4},  {"####..###..####", 5}, {"####..####.####", 6}, {"###..#..#..#..#", 7},
    {"####.#####.####", 8},  {"####.####..####", 9}};

struct Blob {
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  std::vector<std::pair<int, int>> px;
};

std::vector<Blob> blobs(const Rgb8& img, Color ink) {
  std::vector<int> seen(std::size_t(img.width * img.height), 0);
  std::vector<Blob> out;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (seen[std::size_t(y * img.width + x)] || get_pixel(img, x, y) != ink) continue;
      Blob b;
      std::vector<std::pair<int, int>> stack{{x, y}};
      seen[std::size_t(y * img.width + x)] = 1;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        b.px.push_back({cx, cy});
        b.x0 = std::min(b.x0, cx), b.x1 = std::max(b.x1, cx), b.y0 = std::min(b.y0, cy), b.y1 = std::max(b.y1, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = cx + dx, ny = cy + dy;
            if (!img.contains(nx, ny) || seen[std::size_t(ny * img.width + nx)] || get_pixel(img, nx, ny) != ink) continue;
            seen[std::size_t(ny * img.width + nx)] = 1;
            stack.push_back({nx, ny});
          }
      }
      out.push_back(std::move(b));
    }
  return out;
}

// Reads the digits drawn inside a ring's bounding box, left to right.
int read_label(const Rgb8& img, const Blob& ring, Color ink) {
  std::set<std::pair<int, int>> ring_px(ring.px.begin(), ring.px.end());
  int x0 = 1 << 30, x1 = -1, y0 = 1 << 30;
  for (int y = ring.y0; y <= ring.y1; ++y)
    for (int x = ring.x0; x <= ring.x1; ++x)
      if (get_pixel(img, x, y) == ink && !ring_px.count({x, y})) x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y);
  if (x1 < 0) return -1;
  int label = 0;
  for (int gx = x0; gx <= x1; gx += 4) {
    std::string bits;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c) bits += get_pixel(img, gx + c, y0 + r) == ink ? '#' : '.';
    auto it = kGlyphs.find(bits);
    if (it == kGlyphs.end()) return -1;
    label = label * 10 + it->second;
  }
  return label;
}

class EnvVar {
 public:
  EnvVar(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~EnvVar() { ::unsetenv(name_); }

 private:
  const char* name_;
};

class MockEndpoint {
 public:
  explicit MockEndpoint(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_auth = req.get_header_value("Authorization");
      last_body = req.body;
      handler(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockEndpoint() {
    server_.stop();
    thread_.join();
  }

  EndpointConfig config() const {
    EndpointConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port_);
    c.token_env = "REGRASP_TEST_TOKEN";
    c.timeout_s = 2.0;
    c.max_retries = 1;
    return c;
  }

  std::atomic<int> hits{0};
  std::string last_auth;
  std::string last_body;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string chat_body(const std::string& content) {
  nlohmann::json j = {{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  return j.dump();
}

ScorerQuery query_with_image(int n) {
  ScorerQuery q;
  q.top_n = 3;
  q.prompt = render_vqa_prompt("the peg", 3);
  for (int i = 0; i < n; ++i) q.candidates.push_back({i + 1, {10.0 + 8 * i, 20.0}, std::nullopt});
  q.image = Rgb8(128, 64);
  return q;
}

}  // namespace

// ---- prompts ----

TEST(Prompts, GraspPromptMatchesGolden) {
  EXPECT_EQ(render_grasp_prompt("insert the peg"), read_file("golden/grasp_insert_the_peg.txt"));
  EXPECT_NE(render_grasp_prompt("insert the peg").find("performing the task 'insert the peg'"), std::string::npos);
}

TEST(Prompts, VqaPromptsMatchGolden) {
  EXPECT_EQ(render_vqa_prompt("Position the left gripper at the middle of the upper long edge.", 3),
            read_file("golden/vqa_top3_left.txt"));
  EXPECT_EQ(render_vqa_prompt(with_left_marker_note("Position the right gripper at the middle of the lower long edge."), 1),
            read_file("golden/vqa_top1_right.txt"));
}

TEST(Prompts, TopNAppearsVerbatim) {
  EXPECT_NE(render_vqa_prompt("x", 3).find("top 3 circles"), std::string::npos);
  EXPECT_NE(render_vqa_prompt("x", 1).find("top 1 circles"), std::string::npos);
  EXPECT_THROW(render_vqa_prompt("x", 0), Error);
}

TEST(Prompts, LeftMarkerNote) {
  auto p = render_vqa_prompt(with_left_marker_note("d"), 1);
  EXPECT_NE(p.find("red circle indicates the left gripper's contact position"), std::string::npos);
}

TEST(Prompts, EmptyTaskIsRejected) {
  EXPECT_EQ(code_of([] { render_grasp_prompt(""); }), Errc::EmptyTaskDesc);
}

TEST(Prompts, TaskTextIsNotEscapedOrReexpanded) {
  auto p = render_grasp_prompt("put the robot's {top_n} cup away");
  EXPECT_NE(p.find("'put the robot's {top_n} cup away'"), std::string::npos);
  EXPECT_EQ(render_grasp_prompt("a"), render_grasp_prompt("a"));
}

TEST(Prompts, TemplatePlaceholders) {
  PromptTemplate t("x {a} {b_1} {not valid} {{a}}");
  EXPECT_EQ(t.placeholders(), (std::vector<std::string>{"a", "b_1", "a"}));
  EXPECT_EQ(t.render({{"a", "{b_1}"}, {"b_1", "B"}}), "x {b_1} B {not valid} {{b_1}}");
  EXPECT_EQ(code_of([&] { t.render({{"a", "1"}}); }), Errc::UnboundPlaceholder);
}

// ---- annotation ----

TEST(Annotate, TwelveCirclesAreRedetectedWithTheirLabels) {
  Rgb8 base(200, 120);
  std::vector<GraspCandidate> cands;
  for (int i = 0; i < 12; ++i)
    cands.push_back({i + 1, {20.3 + 32.0 * (i % 6), 25.6 + 60.0 * (i / 6)}, std::nullopt});
  AnnotationStyle style;
  auto img = annotate(base, cands, {}, std::nullopt, style);

  std::vector<Blob> rings;
  for (auto& b : blobs(img, style.default_color))
    if (b.x1 - b.x0 >= 2 * style.radius) rings.push_back(b);
  ASSERT_EQ(rings.size(), 12u);
  std::set<int> labels;
  for (const auto& r : rings) {
    Vec2 centre{(r.x0 + r.x1 + 1) / 2.0, (r.y0 + r.y1 + 1) / 2.0};
    auto nearest = std::min_element(cands.begin(), cands.end(), [&](const auto& a, const auto& b) {
      return distance(a.xy, centre) < distance(b.xy, centre);
    });
    EXPECT_LT(distance(nearest->xy, centre), 1.0);
    int label = read_label(img, r, style.default_color);
    EXPECT_EQ(label, nearest->id);
    labels.insert(label);
  }
  EXPECT_EQ(labels.size(), 12u);
}

TEST(Annotate, PromotedCandidateUsesThePromotedColour) {
  Rgb8 base(100, 60);
  std::vector<GraspCandidate> cands{{1, {20, 30}, std::nullopt}, {3, {60, 30}, std::nullopt}};
  AnnotationStyle style;
  std::vector<int> promoted{3};
  auto img = annotate(base, cands, promoted, std::nullopt, style);
  EXPECT_EQ(get_pixel(img, 60 + style.radius, 30), style.promoted_color);
  EXPECT_EQ(get_pixel(img, 20 + style.radius, 30), style.default_color);
}

TEST(Annotate, LeftMarkerIsAFilledRedDisc) {
  Rgb8 base(60, 60);
  AnnotationStyle style;
  auto img = annotate(base, {}, {}, Vec2{30, 30}, style);
  for (int dy = -style.radius + 1; dy < style.radius; ++dy)
    EXPECT_EQ(get_pixel(img, 30, 30 + dy), style.left_marker_color);
}

TEST(Annotate, NothingChangesOutsideGlyphBoxes) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> byte(0, 255);
  Rgb8 base(96, 80);
  for (auto& v : base.data) v = std::uint8_t(byte(rng));
  AnnotationStyle style;
  const int h = glyph_half_extent(style);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GraspCandidate> cands;
    std::uniform_real_distribution<double> ux(0, 96), uy(0, 80);
    for (int i = 0; i < 12; ++i) cands.push_back({i + 1, {ux(rng), uy(rng)}, std::nullopt});
    Vec2 marker{ux(rng), uy(rng)};
    std::vector<int> promoted{2, 5};
    auto img = annotate(base, cands, promoted, marker, style);
    std::vector<Vec2> centres{marker};
    for (const auto& c : cands) centres.push_back(c.xy);
    for (int y = 0; y < 80; ++y)
      for (int x = 0; x < 96; ++x) {
        bool boxed = std::any_of(centres.begin(), centres.end(), [&](Vec2 c) {
          return x >= std::floor(c.x) - h && x <= std::floor(c.x) + h && y >= std::floor(c.y) - h &&
                 y <= std::floor(c.y) + h;
        });
        if (!boxed) ASSERT_EQ(get_pixel(img, x, y), get_pixel(base, x, y)) << x << "," << y;
      }
  }
}

TEST(Annotate, NoCandidatesLeavesTheImageUnchanged) {
  Rgb8 base(32, 32, 17);
  EXPECT_EQ(annotate(base, {}, {}, std::nullopt), base);
}

TEST(Annotate, OutOfImageCandidatesAreRejected) {
  Rgb8 base(32, 32);
  std::vector<GraspCandidate> c{{1, {40, 3}, std::nullopt}};
  EXPECT_EQ(code_of([&] { annotate(base, c, {}, std::nullopt); }), Errc::OutOfBounds);
  EXPECT_EQ(code_of([&] { annotate(base, {}, {}, Vec2{-1, 3}); }), Errc::OutOfBounds);
}

// ---- parsing ----

TEST(Parse, AnalysisThenJson) {
  EXPECT_EQ(parse_points_response("Analysis... {\"points\": [2, 5, 9]}"), (std::vector<int>{2, 5, 9}));
  EXPECT_EQ(code_of([] { parse_points_response("{\"points\": []}"); }), Errc::EmptySelection);
}

TEST(Parse, RoundTripsRenderedVerdicts) {
  std::mt19937_64 rng(11);
  const std::vector<std::string> rationales{"", "Circle 4 sits on the edge.", "Closest: 3, then 7.",
                                            "Quotes \" and braces } are fine"};
  for (int trial = 0; trial < 2000; ++trial) {
    std::set<int> ids;
    int n = std::uniform_int_distribution<int>(1, 12)(rng);
    while (int(ids.size()) < n) ids.insert(std::uniform_int_distribution<int>(1, 1'000'000)(rng));
    std::vector<int> v(ids.begin(), ids.end());
    std::shuffle(v.begin(), v.end(), rng);
    ScorerVerdict verdict{v, rationales[std::size_t(trial) % rationales.size()]};
    ASSERT_EQ(parse_points_response(render_verdict_reply(verdict)), v);
  }
}

TEST(Parse, MalformedReplyCorpus) {
  std::istringstream corpus(read_file("data/malformed_replies.jsonl"));
  std::string line;
  int cases = 0;
  while (std::getline(corpus, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const auto reply = j.at("reply").get<std::string>();
    ++cases;
    if (j.contains("ids")) {
      EXPECT_EQ(parse_points_response(reply), j.at("ids").get<std::vector<int>>()) << reply;
    } else {
      const auto want = j.at("error").get<std::string>();
      EXPECT_EQ(errc_name(code_of([&] { parse_points_response(reply); })), want) << reply;
    }
  }
  EXPECT_EQ(cases, 30);
}

TEST(Parse, GraspDescriptionRoundTrip) {
  GraspDescription d{"Position the left gripper on the rim.", "Position the right gripper opposite it."};
  auto back = parse_grasp_description(render_grasp_description(d));
  EXPECT_EQ(back.left, d.left);
  EXPECT_EQ(back.right, d.right);
  auto chatty = parse_grasp_description("Step 1: look.\nLeft: 'Position the left gripper here.' Right: 'Position the "
                                        "right gripper there.'\nDone.");
  EXPECT_EQ(chatty.left, "Position the left gripper here.");
  EXPECT_EQ(chatty.right, "Position the right gripper there.");
  EXPECT_EQ(code_of([] { parse_grasp_description("Right: only"); }), Errc::NoParse);
}

TEST(Parse, RationaleIsTheProseBeforeTheJson) {
  EXPECT_EQ(reply_rationale("  Circle 2 is on the edge. {\"points\": [2]}"), "Circle 2 is on the edge.");
  EXPECT_EQ(reply_rationale("{\"points\": [2]}"), "");
}

// ---- fixtures ----

TEST(Fixture, ReplayReproducesTheVerdictSequence) {
  mask::SegMask m(64, 64);
  for (int y = 20; y < 44; ++y)
    for (int x = 10; x < 54; ++x) m.set(x, y);
  auto contour = mask::extract_contour(m);
  auto oracle = refine::OracleScorer::on_contour(contour, std::vector<double>{12.0, 80.0}, 2.0, 5);
  RecordingScorer rec(oracle, "ep", 512);
  Rgb8 img(64, 64);
  auto desc = rec.describe("insert the peg", img);
  std::mt19937_64 rng(8);
  auto sel = refine::select_grasp_pair(img, contour, rec, desc, refine::RefinementConfig{}, rng);

  FixtureLog log;
  log.append_all(rec.records());
  auto path = std::filesystem::temp_directory_path() / "regrasp_fixture_test.jsonl";
  log.save(path);
  auto loaded = FixtureLog::load(path);
  std::filesystem::remove(path);
  ASSERT_EQ(loaded.size(), rec.records().size());

  FixtureScorer replay(loaded.episode("ep"));
  auto desc2 = replay.describe("insert the peg", img);
  EXPECT_EQ(desc2.left, desc.left);
  std::mt19937_64 rng2(8);
  auto sel2 = refine::select_grasp_pair(img, contour, replay, desc2, refine::RefinementConfig{}, rng2);
  for (std::size_t i = 0; i < sel.left.iterations.size(); ++i) {
    EXPECT_EQ(sel2.left.iterations[i].verdict.selected_ids, sel.left.iterations[i].verdict.selected_ids);
    EXPECT_EQ(sel2.right.iterations[i].verdict.selected_ids, sel.right.iterations[i].verdict.selected_ids);
  }
  EXPECT_EQ(sel2.pair.left, sel.pair.left);
  EXPECT_EQ(replay.remaining(), 0u);
}

TEST(Fixture, DivergenceIsAScorerFailure) {
  std::vector<FixtureRecord> recs{{"e", "select", sha256_hex(std::string("prompt A")), "", "ok {\"points\": [1]}"}};
  FixtureScorer replay(recs);
  ScorerQuery q;
  q.prompt = "prompt B";
  q.candidates = {{1, {0, 0}, std::nullopt}};
  EXPECT_EQ(code_of([&] { replay.select(q); }), Errc::ScorerFailure);

  FixtureScorer again(recs);
  q.prompt = "prompt A";
  EXPECT_EQ(again.select(q).selected_ids, std::vector<int>{1});
  EXPECT_EQ(code_of([&] { again.select(q); }), Errc::ScorerFailure);
  EXPECT_EQ(code_of([] { FixtureLog().episode("missing"); }), Errc::ScorerFailure);
  EXPECT_EQ(code_of([] { FixtureLog::load("/nonexistent/fixture.jsonl"); }), Errc::ConfigError);
}

// ---- remote endpoint ----

TEST(Remote, RequestCarriesPromptImageAndToken) {
  EnvVar token("REGRASP_TEST_TOKEN", "sk-test");
  MockEndpoint mock([](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_body("Circle 2 is closest. {\"points\": [2, 1]}"), "application/json");
  });
  RemoteScorer scorer(mock.config(), "7");
  auto v = scorer.select(query_with_image(4));
  EXPECT_EQ(v.selected_ids, (std::vector<int>{2, 1}));
  EXPECT_EQ(v.rationale, "Circle 2 is closest.");
  EXPECT_EQ(mock.last_auth, "Bearer sk-test");
  auto body = nlohmann::json::parse(mock.last_body);
  EXPECT_EQ(body.at("model"), "gpt-4o");
  const auto& content = body.at("messages").at(0).at("content");
  EXPECT_EQ(content.at(0).at("text"), render_vqa_prompt("the peg", 3));
  EXPECT_EQ(content.at(1).at("image_url").at("url").get<std::string>().rfind("data:image/png;base64,", 0), 0u);
  ASSERT_EQ(scorer.records().size(), 1u);
  EXPECT_EQ(scorer.records()[0].episode, "7");
}

TEST(Remote, UnauthorisedIsAnAuthError) {
  EnvVar token("REGRASP_TEST_TOKEN", "bad");
  MockEndpoint mock([](const httplib::Request&, httplib::Response& res) { res.status = 401; });
  RemoteScorer scorer(mock.config());
  EXPECT_EQ(code_of([&] { scorer.select(query_with_image(3)); }), Errc::AuthError);
  EXPECT_EQ(mock.hits, 1);
}

TEST(Remote, MissingTokenIsAnAuthError) {
  ::unsetenv("REGRASP_TEST_TOKEN");
  MockEndpoint mock([](const httplib::Request&, httplib::Response& res) { res.set_content(chat_body("{}"), "application/json"); });
  RemoteScorer scorer(mock.config());
  EXPECT_EQ(code_of([&] { scorer.select(query_with_image(3)); }), Errc::AuthError);
  EXPECT_EQ(mock.hits, 0);
}

TEST(Remote, ReplyWithoutJsonIsRetriedOnce) {
  EnvVar token("REGRASP_TEST_TOKEN", "sk-test");
  std::atomic<int> n{0};
  MockEndpoint mock([&](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_body(n++ == 0 ? "I would pick the third circle." : "Third. {\"points\": [3]}"),
                    "application/json");
  });
  RemoteScorer scorer(mock.config());
  mask::SegMask m(32, 32);
  for (int y = 8; y < 24; ++y)
    for (int x = 8; x < 24; ++x) m.set(x, y);
  auto contour = mask::extract_contour(m);
  refine::RefinementConfig cfg;
  cfg.iterations = 1;
  Rgb8 img(32, 32);
  std::mt19937_64 rng(1);
  refine::ContourSampler sampler(contour);
  refine::RefineContext ctx;
  ctx.image = &img;
  auto res = refine::refine(sampler, scorer, "the block", GripperRole::Left, cfg, rng, ctx);
  EXPECT_EQ(res.trace.iterations[0].retries_used, 1);
  EXPECT_EQ(res.trace.iterations[0].verdict.selected_ids, std::vector<int>{3});
  EXPECT_EQ(res.chosen.id, 3);
  EXPECT_EQ(mock.hits, 2);
}

TEST(Remote, ServerErrorsAreRetriedThenGiveUp) {
  EnvVar token("REGRASP_TEST_TOKEN", "sk-test");
  std::atomic<int> n{0};
  MockEndpoint mock([&](const httplib::Request&, httplib::Response& res) {
    if (n++ == 0) res.status = 503;
    else res.set_content(chat_body("{\"points\": [1]}"), "application/json");
  });
  RemoteScorer scorer(mock.config());
  EXPECT_EQ(scorer.select(query_with_image(2)).selected_ids, std::vector<int>{1});
  EXPECT_EQ(scorer.transport_retries(), 1);

  MockEndpoint down([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  RemoteScorer failing(down.config());
  EXPECT_EQ(code_of([&] { failing.select(query_with_image(2)); }), Errc::ScorerFailure);
  EXPECT_EQ(down.hits, 2);
}

TEST(Remote, SlowEndpointTimesOut) {
  EnvVar token("REGRASP_TEST_TOKEN", "sk-test");
  MockEndpoint mock([](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    res.set_content(chat_body("{\"points\": [1]}"), "application/json");
  });
  auto cfg = mock.config();
  cfg.timeout_s = 0.2;
  cfg.max_retries = 0;
  RemoteScorer scorer(cfg);
  EXPECT_EQ(code_of([&] { scorer.select(query_with_image(2)); }), Errc::Timeout);
}

TEST(Remote, EndpointConfigRoundTripAndValidation) {
  EndpointConfig c;
  c.model = "other";
  c.max_side = 256;
  auto back = endpoint_config_from_json(to_json(c));
  EXPECT_EQ(back.model, "other");
  EXPECT_EQ(back.max_side, 256);
  EXPECT_EQ(code_of([] { endpoint_config_from_json({{"timeout_s", 0}}); }), Errc::ConfigError);
  EXPECT_FALSE(to_json(c).dump().find("sk-") != std::string::npos);
}

TEST(Remote, ChatReplyWithoutChoicesDoesNotParse) {
  EXPECT_EQ(code_of([] { chat_reply_text("{\"error\": \"x\"}"); }), Errc::NoParse);
  EXPECT_EQ(code_of([] { chat_reply_text("not json"); }), Errc::NoParse);
  EXPECT_EQ(chat_reply_text(chat_body("hello")), "hello");
}
