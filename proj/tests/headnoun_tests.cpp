#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "cdiff/headnoun.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("cdiff_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small stub endpoint running on a background thread. The handler decides the
// body; the server records the last Authorization header it saw.
class StubServer {
  public:
    std::function<void(const httplib::Request&, httplib::Response&)> handler;
    std::string last_authorization;
    std::atomic<int> hits{0};

    StubServer() {
        server_.Post("/v1/complete", [this](const httplib::Request& req, httplib::Response& res) {
            hits++;
            if (req.has_header("Authorization"))
                last_authorization = req.get_header_value("Authorization");
            handler(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        REQUIRE(port_ > 0);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const {
        return "http://127.0.0.1:" + std::to_string(port_) + "/v1/complete";
    }

  private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

}  // namespace

TEST_CASE("rule takes the final word as the head noun") {
    REQUIRE(resolve_head_rule("dotted bar") == "bar");
    REQUIRE(resolve_head_rule("Checkered Block") == "block");
    REQUIRE(resolve_head_rule("disk") == "disk");
    REQUIRE_THROWS(resolve_head_rule("   "));
}

TEST_CASE("negative prompt collects the non-head words") {
    REQUIRE(build_negative_prompt("dotted bar", "bar").value() == "a photo of dotted");
    REQUIRE(build_negative_prompt("big dotted bar", "bar").value() == "a photo of big dotted");
    REQUIRE_FALSE(build_negative_prompt("disk", "disk").has_value());
}

TEST_CASE("resolver answers by rule and caches to disk") {
    fs::path dir = fresh_dir("hncache");
    std::string cache = (dir / "cache.jsonl").string();
    {
        HeadNounResolver r(cache);
        auto a = r.resolve("Dotted Bar");
        REQUIRE(a.head == "bar");
        REQUIRE(a.source == "rule");
        auto b = r.resolve("dotted bar");
        REQUIRE(b.source == "rule (cached)");
    }
    {
        // a fresh resolver reloads the persisted answers
        HeadNounResolver r(cache);
        auto c = r.resolve("dotted bar");
        REQUIRE(c.head == "bar");
        REQUIRE(c.source == "rule (cached)");
        auto d = r.resolve("ring");
        REQUIRE(d.source == "rule");
    }
    std::ifstream in(cache);
    int lines = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines++;
    REQUIRE(lines == 2);  // one record per distinct category
}

TEST_CASE("external endpoint answers are accepted in both body shapes") {
    StubServer stub;
    HeadNounResolver r;
    r.use_external = true;
    r.external.endpoint = stub.endpoint();
    r.external.retries = 0;

    SECTION("plain text body") {
        stub.handler = [](const httplib::Request&, httplib::Response& res) {
            res.set_content("  Bar \n", "text/plain");
        };
        auto a = r.resolve("dotted bar");
        REQUIRE(a.head == "bar");
        REQUIRE(a.source == "external");
    }
    SECTION("chat-completion json body") {
        stub.handler = [](const httplib::Request& req, httplib::Response& res) {
            auto j = nlohmann::json::parse(req.body);
            REQUIRE(j.contains("prompt"));
            nlohmann::json out;
            out["choices"][0]["message"]["content"] = "bar";
            res.set_content(out.dump(), "application/json");
        };
        auto a = r.resolve("checkered bar");
        REQUIRE(a.head == "bar");
        REQUIRE(a.source == "external");
    }
}

TEST_CASE("out-of-category answers fall back to the rule") {
    StubServer stub;
    stub.handler = [](const httplib::Request&, httplib::Response& res) {
        res.set_content("banana", "text/plain");
    };
    HeadNounResolver r;
    r.use_external = true;
    r.external.endpoint = stub.endpoint();
    std::ostringstream log;
    auto a = r.resolve("dotted bar", &log);
    REQUIRE(a.head == "bar");
    REQUIRE(a.source == "rule-fallback");
    REQUIRE(log.str().find("banana") != std::string::npos);
    REQUIRE(stub.hits == 1);  // invalid answers are not retried
}

TEST_CASE("unreachable endpoint falls back after retries") {
    HeadNounResolver r;
    r.use_external = true;
    r.external.endpoint = "http://127.0.0.1:1/v1/complete";  // nothing listens here
    r.external.retries = 1;
    r.external.timeout_seconds = 1;
    std::ostringstream log;
    auto a = r.resolve("striped disk", &log);
    REQUIRE(a.head == "disk");
    REQUIRE(a.source == "rule-fallback");
}

TEST_CASE("server errors are retried until the budget runs out") {
    StubServer stub;
    std::atomic<int> calls{0};
    stub.handler = [&](const httplib::Request&, httplib::Response& res) {
        if (++calls <= 1) {
            res.status = 500;
            return;
        }
        res.set_content("wedge", "text/plain");
    };
    HeadNounResolver r;
    r.use_external = true;
    r.external.endpoint = stub.endpoint();
    r.external.retries = 2;
    auto a = r.resolve("striped wedge");
    REQUIRE(a.head == "wedge");
    REQUIRE(a.source == "external");
    REQUIRE(calls == 2);
}

TEST_CASE("bearer token from the environment reaches the endpoint") {
    StubServer stub;
    stub.handler = [](const httplib::Request&, httplib::Response& res) {
        res.set_content("cross", "text/plain");
    };
    setenv("HEADNOUN_API_TOKEN", "sekrit-123", 1);
    HeadNounResolver r;
    r.use_external = true;
    r.external.endpoint = stub.endpoint();
    auto a = r.resolve("red cross");
    unsetenv("HEADNOUN_API_TOKEN");
    REQUIRE(a.head == "cross");
    REQUIRE(stub.last_authorization == "Bearer sekrit-123");
}

TEST_CASE("external answers are cached with their source") {
    fs::path dir = fresh_dir("hncache2");
    std::string cache = (dir / "cache.jsonl").string();
    StubServer stub;
    stub.handler = [](const httplib::Request&, httplib::Response& res) {
        res.set_content("block", "text/plain");
    };
    {
        HeadNounResolver r(cache);
        r.use_external = true;
        r.external.endpoint = stub.endpoint();
        REQUIRE(r.resolve("checkered block").source == "external");
    }
    REQUIRE(stub.hits == 1);
    {
        HeadNounResolver r(cache);  // external disabled: cache should still answer
        auto a = r.resolve("checkered block");
        REQUIRE(a.head == "block");
        REQUIRE(a.source == "external (cached)");
    }
    REQUIRE(stub.hits == 1);
}
