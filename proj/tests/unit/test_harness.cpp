#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include "riskeval/harness.hpp"

using namespace riskeval;
using doctest::Approx;

namespace {

EvalRequest make_req(std::int64_t id, std::vector<double> scenario) {
    EvalRequest r;
    r.id = id;
    r.seed = 1000 + static_cast<std::uint64_t>(id);
    r.latent = {0.5, -0.5};
    r.scenario = std::move(scenario);
    return r;
}

// Line worker used by the command-backend tests: answers with the first
// scenario entry, like the bundled echo simulator.
const char* kPyWorker =
    "python3 -u -c \""
    "import sys, json\n"
    "for line in sys.stdin:\n"
    "    m = json.loads(line)\n"
    "    print(json.dumps({'id': m['id'], 'objective': m['scenario'][0], "
    "'wall_ms': 0}), flush=True)\n"
    "\"";

}  // namespace

TEST_CASE("request codec is stable, ordered, and strict") {
    EvalRequest req;
    req.id = 7;
    req.seed = 123456789012345ULL;
    req.latent = {1.5, -2.25};
    req.scenario = {3.0};

    const std::string line = encode_request(req);
    CHECK(line ==
          R"({"id":7,"seed":123456789012345,"latent":[1.5,-2.25],"scenario":[3.0]})");

    const auto back = decode_request(line);
    CHECK(back.id == req.id);
    CHECK(back.seed == req.seed);
    CHECK(back.latent == req.latent);
    CHECK(back.scenario == req.scenario);

    CHECK_THROWS_WITH_AS(
        (void)decode_request(R"({"id":1,"seed":2,"latent":[]})"),
        "request: missing field 'scenario'", std::runtime_error);
    CHECK_THROWS_WITH_AS(
        (void)decode_request(
            R"({"id":1,"seed":2,"latent":[],"scenario":[],"extra":0})"),
        "request: unknown field 'extra'", std::runtime_error);
    CHECK_THROWS_AS(
        (void)decode_request(R"({"id":1.5,"seed":2,"latent":[],"scenario":[]})"),
        std::runtime_error);
    CHECK_THROWS_AS((void)decode_request("not json"), std::runtime_error);
    // Numbers that parse to infinity are rejected, not passed through.
    CHECK_THROWS_AS(
        (void)decode_request(
            R"({"id":1,"seed":2,"latent":[1e999],"scenario":[]})"),
        std::runtime_error);
}

TEST_CASE("response codec is stable, ordered, and strict") {
    const std::string line = encode_response({42, -1.25, 17});
    CHECK(line == R"({"id":42,"objective":-1.25,"wall_ms":17})");
    const auto back = decode_response(line);
    CHECK(back.id == 42);
    CHECK(back.objective == -1.25);
    CHECK(back.wall_ms == 17);

    CHECK_THROWS_WITH_AS((void)decode_response(R"({"id":1,"objective":2.0})"),
                         "response: missing field 'wall_ms'", std::runtime_error);
    CHECK_THROWS_AS(
        (void)decode_response(R"({"id":1,"objective":null,"wall_ms":0})"),
        std::runtime_error);
    CHECK_THROWS_AS(
        (void)decode_response(R"({"id":1,"objective":1e999,"wall_ms":0})"),
        std::runtime_error);
    CHECK_THROWS_AS((void)encode_response({1, 1.0 / 0.0, 0}), std::runtime_error);
}

TEST_CASE("in-process pool evaluates, sorts by id, and counts evals") {
    PoolConfig cfg;
    cfg.n_workers = 4;
    EvalPool pool(cfg, [](const std::vector<double>&,
                          const std::vector<double>& x) { return x[0] * 2.0; });

    std::vector<EvalRequest> reqs;
    for (int i = 19; i >= 0; --i) reqs.push_back(make_req(i, {double(i)}));

    const auto out = pool.submit_batch(reqs);
    REQUIRE(out.size() == 20);
    for (int i = 0; i < 20; ++i) {
        CHECK(out[static_cast<std::size_t>(i)].id == i);
        CHECK(out[static_cast<std::size_t>(i)].objective == 2.0 * i);
    }
    CHECK(pool.total_evals() == 20);
    (void)pool.submit_batch({make_req(99, {1.0})});
    CHECK(pool.total_evals() == 21);
}

TEST_CASE("results are identical across worker counts") {
    std::vector<EvalRequest> reqs;
    for (int i = 0; i < 500; ++i)
        reqs.push_back(make_req(i, {0.1 * i, -0.2 * i}));

    auto run = [&](int workers) {
        PoolConfig cfg;
        cfg.n_workers = workers;
        EvalPool pool(cfg, [](const std::vector<double>& u,
                              const std::vector<double>& x) {
            double acc = u[0];
            for (const double v : x) acc += std::sin(v) * 0.125;
            return acc;
        });
        return pool.submit_batch(reqs);
    };

    const auto a = run(1);
    const auto b = run(8);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == b[i].id);
        // Bit-for-bit equality, not approximate.
        CHECK(a[i].objective == b[i].objective);
    }
}

TEST_CASE("duplicate request ids are rejected up front") {
    PoolConfig cfg;
    EvalPool pool(cfg, [](const std::vector<double>&,
                          const std::vector<double>&) { return 0.0; });
    CHECK_THROWS_AS(
        (void)pool.submit_batch({make_req(3, {1.0}), make_req(3, {2.0})}),
        std::invalid_argument);
}

TEST_CASE("objective exceptions surface as eval errors with diagnostics") {
    PoolConfig cfg;
    cfg.n_workers = 2;
    EvalPool pool(cfg, [](const std::vector<double>&,
                          const std::vector<double>& x) -> double {
        if (x[0] > 2.0) throw std::runtime_error("scenario out of range");
        return x[0];
    });
    std::vector<EvalRequest> reqs;
    for (int i = 0; i < 8; ++i) reqs.push_back(make_req(i, {double(i)}));
    try {
        (void)pool.submit_batch(reqs);
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(std::string(e.what()).find("scenario out of range") != std::string::npos);
        CHECK(e.diagnostic().find("\"error\":\"evaluation\"") != std::string::npos);
    }
}

TEST_CASE("command backend round-trips through an external process") {
    PoolConfig cfg;
    cfg.backend = PoolBackend::Command;
    cfg.n_workers = 2;
    cfg.command = kPyWorker;
    cfg.timeout_ms = 20000;
    EvalPool pool(cfg, nullptr);

    std::vector<EvalRequest> reqs;
    for (int i = 0; i < 40; ++i) reqs.push_back(make_req(i, {i * 0.5, 1.0}));
    const auto out = pool.submit_batch(reqs);
    REQUIRE(out.size() == 40);
    for (int i = 0; i < 40; ++i)
        CHECK(out[static_cast<std::size_t>(i)].objective == Approx(i * 0.5));

    // Slots stay warm: a second batch reuses the same workers.
    const auto out2 = pool.submit_batch({make_req(100, {7.0})});
    REQUIRE(out2.size() == 1);
    CHECK(out2[0].objective == Approx(7.0));
}

TEST_CASE("command backend worker crash exhausts retries into an error") {
    PoolConfig cfg;
    cfg.backend = PoolBackend::Command;
    cfg.n_workers = 1;
    cfg.command = "cat";  // echoes requests, which never decode as responses
    cfg.max_retries = 1;
    cfg.timeout_ms = 5000;
    EvalPool pool(cfg, nullptr);
    try {
        (void)pool.submit_batch({make_req(0, {1.0})});
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(e.diagnostic().find("\"retries\":2") != std::string::npos);
    }
}

TEST_CASE("command backend times out a silent worker") {
    PoolConfig cfg;
    cfg.backend = PoolBackend::Command;
    cfg.n_workers = 1;
    cfg.command = "sleep 600";
    cfg.max_retries = 0;
    cfg.timeout_ms = 300;
    EvalPool pool(cfg, nullptr);
    CHECK_THROWS_AS((void)pool.submit_batch({make_req(0, {1.0})}), EvalError);
}

namespace {

// Minimal line-protocol TCP server for the tests: answers objective =
// -scenario[0]; optionally drops each connection after `drop_after`
// responses to exercise the reconnect path.
class TestServer {
  public:
    explicit TestServer(int drop_after = -1) : drop_after_(drop_after) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        REQUIRE(listen_fd_ >= 0);
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = 0;
        REQUIRE(::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr),
                       sizeof addr) == 0);
        socklen_t len = sizeof addr;
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        REQUIRE(::listen(listen_fd_, 16) == 0);
        thread_ = std::thread([this] { accept_loop(); });
    }

    ~TestServer() {
        stop_.store(true);
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        thread_.join();
        for (auto& t : conns_) t.join();
    }

    int port() const { return port_; }

  private:
    void accept_loop() {
        for (;;) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) return;
            if (stop_.load()) {
                ::close(fd);
                return;
            }
            conns_.emplace_back([this, fd] { serve(fd); });
        }
    }

    void serve(int fd) {
        std::string buf;
        char chunk[1024];
        int answered = 0;
        for (;;) {
            const ssize_t r = ::read(fd, chunk, sizeof chunk);
            if (r <= 0) break;
            buf.append(chunk, static_cast<std::size_t>(r));
            std::size_t nl;
            while ((nl = buf.find('\n')) != std::string::npos) {
                const std::string line = buf.substr(0, nl);
                buf.erase(0, nl + 1);
                EvalRequest req;
                try {
                    req = decode_request(line);
                } catch (...) {
                    ::close(fd);
                    return;
                }
                const std::string resp =
                    encode_response({req.id, -req.scenario.at(0), 1}) + "\n";
                if (::write(fd, resp.data(), resp.size()) < 0) {
                    ::close(fd);
                    return;
                }
                if (drop_after_ > 0 && ++answered >= drop_after_) {
                    ::close(fd);
                    return;
                }
            }
        }
        ::close(fd);
    }

    int listen_fd_ = -1;
    int port_ = 0;
    int drop_after_;
    std::atomic<bool> stop_{false};
    std::thread thread_;
    std::vector<std::thread> conns_;
};

}  // namespace

TEST_CASE("tcp backend round-trips against a live server") {
    TestServer server;
    PoolConfig cfg;
    cfg.backend = PoolBackend::Tcp;
    cfg.n_workers = 3;
    cfg.host = "127.0.0.1";
    cfg.port = server.port();
    EvalPool pool(cfg, nullptr);

    std::vector<EvalRequest> reqs;
    for (int i = 0; i < 60; ++i) reqs.push_back(make_req(i, {double(i)}));
    const auto out = pool.submit_batch(reqs);
    REQUIRE(out.size() == 60);
    for (int i = 0; i < 60; ++i)
        CHECK(out[static_cast<std::size_t>(i)].objective == Approx(-double(i)));
}

TEST_CASE("tcp backend survives servers that drop connections") {
    TestServer server(/*drop_after=*/5);
    PoolConfig cfg;
    cfg.backend = PoolBackend::Tcp;
    cfg.n_workers = 2;
    cfg.host = "127.0.0.1";
    cfg.port = server.port();
    cfg.max_retries = 30;
    EvalPool pool(cfg, nullptr);

    std::vector<EvalRequest> reqs;
    for (int i = 0; i < 50; ++i) reqs.push_back(make_req(i, {double(i)}));
    const auto out = pool.submit_batch(reqs);
    REQUIRE(out.size() == 50);
    for (int i = 0; i < 50; ++i)
        CHECK(out[static_cast<std::size_t>(i)].objective == Approx(-double(i)));
}

TEST_CASE("tcp backend reports unreachable servers after the budget") {
    PoolConfig cfg;
    cfg.backend = PoolBackend::Tcp;
    cfg.n_workers = 1;
    cfg.host = "127.0.0.1";
    cfg.port = 1;  // nothing listens here
    cfg.max_retries = 1;
    EvalPool pool(cfg, nullptr);
    CHECK_THROWS_AS((void)pool.submit_batch({make_req(0, {1.0})}), EvalError);
}
