#include "hsds/cli.hpp"
#include "hsds/data.hpp"
#include "test_util.hpp"

#include <fstream>
#include <iterator>

using namespace hsds;
using namespace hsds::cli;
using nlohmann::json;

namespace {

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "hsds");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

json::json_pointer ptr(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return json::json_pointer(p);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> tiny_flags(const test::TempDir& dir) {
  const auto fx = test::toy_fixture_dir();
  return {"--seed=4",
          "--paths.search_manifest=" + (fx / "search.csv").string(),
          "--paths.natural_pool=" + (fx / "natural.txt").string(),
          "--paths.fuse_manifest=" + (fx / "heldout.csv").string(),
          "--paths.out_dir=" + dir.path().string(),
          "--model.width=2",
          "--model.iterations=1",
          "--search.epochs=1",
          "--search.crop=16",
          "--train.epochs=1",
          "--train.crop=16",
          "--train.batch_size=4"};
}

std::vector<std::string> with(std::vector<std::string> flags, const std::string& cmd) {
  flags.insert(flags.begin(), cmd);
  return flags;
}

}  // namespace

TEST_CASE("defaults cover every key") {
  const auto d = default_config();
  for (const auto& k : config_keys()) CHECK(d.at(ptr(k.name)) == k.default_value);
  CHECK(d.at(ptr("search.lr_alpha")) == 0.2);
  CHECK(d.at(ptr("train.epochs")) == 60);
}

TEST_CASE("flags beat the file and the file beats defaults, per key") {
  for (const auto& k : config_keys()) {
    CAPTURE(k.name);
    json file_value;
    std::string flag_text;
    json flag_value;
    switch (k.type) {
      case KeyType::integer: file_value = 7; flag_text = "9"; flag_value = 9; break;
      case KeyType::real:
      case KeyType::optional_real: file_value = 0.5; flag_text = "0.25"; flag_value = 0.25; break;
      case KeyType::text: file_value = "from-file"; flag_text = "from-flag"; flag_value = "from-flag"; break;
    }
    json file = json::object();
    file[ptr(k.name)] = file_value;
    CHECK(resolve_config(json(), {}).at(ptr(k.name)) == k.default_value);
    CHECK(resolve_config(file, {}).at(ptr(k.name)) == file_value);
    CHECK(resolve_config(file, {{k.name, flag_text}}).at(ptr(k.name)) == flag_value);
    CHECK(resolve_config(json(), {{k.name, flag_text}}).at(ptr(k.name)) == flag_value);
  }
  CHECK(resolve_config(json(), {{"search.theta", "null"}}).at(ptr("search.theta")).is_null());
}

TEST_CASE("unknown or mistyped configuration is rejected") {
  CHECK_THROWS_AS(resolve_config(json{{"search", {{"lr_gamma", 1.0}}}}, {}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json(), {{"nope", "1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json{{"train", {{"epochs", "ten"}}}}, {}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json::array(), {}), ConfigError);
  CHECK_THROWS_AS(parse_value(config_keys().front(), "1.5"), ConfigError);

  test::TempDir dir("cli_cfg");
  std::ofstream(dir / "bad.json") << R"({"model": {"depth": 3}})";
  CHECK(invoke({"eval", "--config", (dir / "bad.json").string()}) == kExitUsage);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(invoke({"eval", "--config", (dir / "broken.json").string()}) == kExitUsage);
  CHECK(invoke({"eval", "--config", (dir / "absent.json").string()}) == kExitUsage);
  CHECK(invoke({"search", "--search.bogus=1"}) == kExitUsage);
  CHECK(invoke({}) == kExitUsage);
  CHECK(invoke({"search", "--search.epochs=many"}) == kExitUsage);
}

TEST_CASE("command error paths") {
  test::TempDir dir("cli_err");
  const auto flags = tiny_flags(dir);

  SUBCASE("search without a natural pool") {
    auto f = flags;
    std::erase_if(f, [](const std::string& s) { return s.rfind("--paths.natural_pool", 0) == 0; });
    CHECK(invoke(with(f, "search")) == kExitUsage);
  }
  SUBCASE("train without search artifacts") { CHECK(invoke(with(flags, "train")) == kExitUsage); }
  SUBCASE("train with a corrupted architecture") {
    std::ofstream(dir / "architecture.json") << "{\"fusion\": ";
    std::ofstream(dir / "loss_weights.json") << "{}";
    CHECK(invoke(with(flags, "train")) == kExitUsage);
  }
  SUBCASE("fuse without a checkpoint") { CHECK(invoke(with(flags, "fuse")) == kExitRuntime); }
  SUBCASE("eval with no fused images") { CHECK(invoke(with(flags, "eval")) == kExitRuntime); }
}

TEST_CASE("search, train, fuse and eval round trip") {
  test::TempDir dir("cli_rt");
  const auto flags = tiny_flags(dir);
  REQUIRE(invoke(with(flags, "search")) == kExitOk);
  for (const char* f : {"architecture.json", "loss_weights.json", "prune_log.ndjson", "history.csv"})
    CHECK(std::filesystem::exists(dir / f));
  const std::string arch = slurp(dir / "architecture.json");

  REQUIRE(invoke(with(flags, "train")) == kExitOk);
  CHECK(std::filesystem::exists(dir / "model.hsds"));
  REQUIRE(invoke(with(flags, "fuse")) == kExitOk);
  const auto manifest = load_manifest(test::toy_fixture_dir() / "heldout.csv");
  for (const auto& e : manifest.entries) {
    const Image fused = read_image(dir / "fused" / (e.id + ".png"));
    const Image under = read_image(e.under);
    CHECK(fused.height() == under.height());
    CHECK(fused.width() == under.width());
  }
  const std::string first = slurp(dir / "fused" / "h00.png");
  REQUIRE(invoke(with(flags, "fuse")) == kExitOk);
  CHECK(slurp(dir / "fused" / "h00.png") == first);

  REQUIRE(invoke(with(flags, "eval")) == kExitOk);
  std::ifstream in(dir / "report.json");
  const auto rep = json::parse(in);
  for (const char* m : {"SD", "VIF", "CC", "TMQI", "MS_SSIM", "MEF_SSIM", "EN", "QABF"}) CHECK(rep["aggregate"].contains(m));
  CHECK_FALSE(rep["per_image"]["h03"].contains("CC"));

  SUBCASE("single pair fuse") {
    auto f = flags;
    f.push_back("--fuse.under=" + manifest.entries[0].under.string());
    f.push_back("--fuse.over=" + manifest.entries[0].over.string());
    f.push_back("--fuse.output=" + (dir / "one.png").string());
    REQUIRE(invoke(with(f, "fuse")) == kExitOk);
    CHECK(slurp(dir / "one.png") == first);
  }
  SUBCASE("same seed, same architecture bytes") {
    test::TempDir other("cli_rt2");
    auto f = flags;
    for (auto& s : f)
      if (s.rfind("--paths.out_dir", 0) == 0) s = "--paths.out_dir=" + other.path().string();
    REQUIRE(invoke(with(f, "search")) == kExitOk);
    CHECK(slurp(other / "architecture.json") == arch);
    CHECK(slurp(other / "loss_weights.json") == slurp(dir / "loss_weights.json"));
    CHECK(slurp(other / "history.csv") == slurp(dir / "history.csv"));
  }
}
