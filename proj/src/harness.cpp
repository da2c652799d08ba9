#include "riskeval/harness.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include <json.hpp>

namespace riskeval {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

namespace {

[[noreturn]] void codec_fail(const char* kind, const std::string& what) {
    throw std::runtime_error(std::string(kind) + ": " + what);
}

void check_exact_fields(const json& obj, const char* kind,
                        std::initializer_list<const char*> fields) {
    if (!obj.is_object()) codec_fail(kind, "line is not a JSON object");
    for (const char* f : fields)
        if (!obj.contains(f)) codec_fail(kind, std::string("missing field '") + f + "'");
    if (obj.size() != fields.size())
        for (const auto& [key, _] : obj.items()) {
            bool known = false;
            for (const char* f : fields) known = known || key == f;
            if (!known) codec_fail(kind, "unknown field '" + key + "'");
        }
}

std::vector<double> finite_array(const json& arr, const char* kind,
                                 const char* field) {
    if (!arr.is_array())
        codec_fail(kind, std::string("field '") + field + "' must be an array");
    std::vector<double> out;
    out.reserve(arr.size());
    for (const auto& v : arr) {
        if (!v.is_number())
            codec_fail(kind, std::string("field '") + field + "' has a non-number");
        const double d = v.get<double>();
        if (!std::isfinite(d))
            codec_fail(kind, std::string("field '") + field + "' has a non-finite value");
        out.push_back(d);
    }
    return out;
}

}  // namespace

std::string encode_request(const EvalRequest& req) {
    ordered o;
    o["id"] = req.id;
    o["seed"] = req.seed;
    o["latent"] = req.latent;
    o["scenario"] = req.scenario;
    return o.dump();
}

EvalRequest decode_request(std::string_view line) {
    json obj;
    try {
        obj = json::parse(line);
    } catch (const json::exception& e) {
        codec_fail("request", std::string("parse error: ") + e.what());
    }
    check_exact_fields(obj, "request", {"id", "seed", "latent", "scenario"});
    if (!obj["id"].is_number_integer()) codec_fail("request", "field 'id' must be an integer");
    if (!obj["seed"].is_number_unsigned() && !obj["seed"].is_number_integer())
        codec_fail("request", "field 'seed' must be an integer");
    EvalRequest req;
    req.id = obj["id"].get<std::int64_t>();
    req.seed = obj["seed"].get<std::uint64_t>();
    req.latent = finite_array(obj["latent"], "request", "latent");
    req.scenario = finite_array(obj["scenario"], "request", "scenario");
    return req;
}

std::string encode_response(const EvalResponse& resp) {
    if (!std::isfinite(resp.objective))
        throw std::runtime_error("response: objective is not finite");
    ordered o;
    o["id"] = resp.id;
    o["objective"] = resp.objective;
    o["wall_ms"] = resp.wall_ms;
    return o.dump();
}

EvalResponse decode_response(std::string_view line) {
    json obj;
    try {
        obj = json::parse(line);
    } catch (const json::exception& e) {
        codec_fail("response", std::string("parse error: ") + e.what());
    }
    check_exact_fields(obj, "response", {"id", "objective", "wall_ms"});
    if (!obj["id"].is_number_integer()) codec_fail("response", "field 'id' must be an integer");
    if (!obj["objective"].is_number()) codec_fail("response", "field 'objective' must be a number");
    if (!obj["wall_ms"].is_number_integer())
        codec_fail("response", "field 'wall_ms' must be an integer");
    EvalResponse resp;
    resp.id = obj["id"].get<std::int64_t>();
    resp.objective = obj["objective"].get<double>();
    if (!std::isfinite(resp.objective))
        codec_fail("response", "field 'objective' has a non-finite value");
    resp.wall_ms = obj["wall_ms"].get<std::int64_t>();
    return resp;
}

// ---------------------------------------------------------------------------
// Pool internals
// ---------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

std::string batch_error_json(const std::string& reason, std::int64_t request_id,
                             int retries) {
    ordered o;
    o["error"] = "evaluation";
    o["reason"] = reason;
    o["request_id"] = request_id;
    o["retries"] = retries;
    return o.dump();
}

// One external worker slot: a child process or a socket, plus its in-flight
// request indices in submission order.
struct Slot {
    int in_fd = -1;   // requests are written here
    int out_fd = -1;  // responses are read here
    pid_t pid = -1;
    std::deque<std::size_t> outstanding;
    std::string rbuf;
    std::string wbuf;
    Clock::time_point last_progress{};
    bool alive = false;
};

void set_nonblocking(int fd) {
    const int flags = fcntl(fd, F_GETFL, 0);
    fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void close_slot(Slot& slot) {
    if (slot.in_fd >= 0) ::close(slot.in_fd);
    if (slot.out_fd >= 0) ::close(slot.out_fd);
    slot.in_fd = slot.out_fd = -1;
    if (slot.pid > 0) {
        ::kill(slot.pid, SIGKILL);
        int status = 0;
        ::waitpid(slot.pid, &status, 0);
        slot.pid = -1;
    }
    slot.alive = false;
    slot.rbuf.clear();
    slot.wbuf.clear();
    slot.outstanding.clear();
}

}  // namespace

struct EvalPool::Impl {
    PoolConfig cfg;
    ObjectiveFn objective;
    std::atomic<std::uint64_t> total{0};

    // In-process engine. Threads park between batches; the started/active
    // counters form a barrier so no thread can ever observe the indices of
    // one batch against the buffers of another.
    std::vector<std::thread> threads;
    std::mutex mtx;
    std::condition_variable cv_work;
    std::condition_variable cv_done;
    const std::vector<EvalRequest>* batch = nullptr;
    std::vector<EvalResponse>* results = nullptr;
    std::atomic<std::size_t> next{0};
    std::size_t started = 0;
    std::size_t active = 0;
    std::uint64_t generation = 0;
    bool stopping = false;
    std::string worker_error;

    // External slots, persistent across batches.
    std::vector<Slot> slots;

    Impl(PoolConfig c, ObjectiveFn fn)
        : cfg(std::move(c)), objective(std::move(fn)) {
        if (cfg.n_workers < 1)
            throw std::invalid_argument("pool: n_workers must be at least 1");
        if (cfg.queue_depth < 1)
            throw std::invalid_argument("pool: queue_depth must be at least 1");
        if (cfg.max_retries < 0)
            throw std::invalid_argument("pool: max_retries must be non-negative");
        if (cfg.backend == PoolBackend::InProcess && !objective)
            throw std::invalid_argument("pool: in-process backend needs an objective");
        if (cfg.backend == PoolBackend::Command && cfg.command.empty())
            throw std::invalid_argument("pool: command backend needs a command");
        if (cfg.backend == PoolBackend::Tcp && (cfg.port <= 0 || cfg.port > 65535))
            throw std::invalid_argument("pool: tcp backend needs a valid port");
        if (cfg.backend != PoolBackend::InProcess) {
            ::signal(SIGPIPE, SIG_IGN);
            slots.resize(static_cast<std::size_t>(cfg.n_workers));
        } else if (cfg.n_workers > 1) {
            threads.reserve(static_cast<std::size_t>(cfg.n_workers));
            for (int w = 0; w < cfg.n_workers; ++w)
                threads.emplace_back([this] { thread_main(); });
        }
    }

    ~Impl() {
        {
            std::lock_guard<std::mutex> lock(mtx);
            stopping = true;
        }
        cv_work.notify_all();
        for (auto& t : threads) t.join();
        for (auto& s : slots) close_slot(s);
    }

    // ---- in-process backend ----

    void thread_main() {
        std::uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lock(mtx);
                cv_work.wait(lock, [&] { return stopping || generation != seen; });
                if (stopping) return;
                seen = generation;
                ++started;
                ++active;
            }
            std::string error;
            const std::size_t n = batch->size();
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                eval_one((*batch)[i], (*results)[i], error);
            }
            {
                std::lock_guard<std::mutex> lock(mtx);
                if (!error.empty() && worker_error.empty()) worker_error = error;
                --active;
            }
            cv_done.notify_all();
        }
    }

    void eval_one(const EvalRequest& req, EvalResponse& out, std::string& error) {
        const auto t0 = Clock::now();
        try {
            out.objective = objective(req.latent, req.scenario);
            if (!std::isfinite(out.objective)) {
                if (error.empty()) error = "objective returned a non-finite value";
                out.objective = 0.0;
            }
        } catch (const std::exception& e) {
            if (error.empty()) error = e.what();
            out.objective = 0.0;
        }
        out.id = req.id;
        out.wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0)
                .count();
    }

    std::vector<EvalResponse> run_in_process(std::vector<EvalRequest>& reqs) {
        std::vector<EvalResponse> out(reqs.size());
        if (threads.empty()) {
            std::string error;
            for (std::size_t i = 0; i < reqs.size(); ++i)
                eval_one(reqs[i], out[i], error);
            if (!error.empty())
                throw EvalError("objective failed: " + error,
                                batch_error_json("objective: " + error, -1, 0));
            return out;
        }

        {
            std::lock_guard<std::mutex> lock(mtx);
            batch = &reqs;
            results = &out;
            next.store(0);
            started = 0;
            active = 0;
            worker_error.clear();
            ++generation;
        }
        cv_work.notify_all();
        std::string error;
        {
            std::unique_lock<std::mutex> lock(mtx);
            cv_done.wait(lock, [&] {
                return started == threads.size() && active == 0;
            });
            batch = nullptr;
            results = nullptr;
            error = worker_error;
        }
        if (!error.empty())
            throw EvalError("objective failed: " + error,
                            batch_error_json("objective: " + error, -1, 0));
        return out;
    }

    // ---- external line-protocol backends ----

    void spawn(Slot& slot) {
        if (cfg.backend == PoolBackend::Command)
            spawn_process(slot);
        else
            connect_socket(slot);
        slot.last_progress = Clock::now();
    }

    void spawn_process(Slot& slot) {
        int to_child[2];
        int from_child[2];
        if (::pipe(to_child) != 0) throw std::runtime_error("pool: pipe() failed");
        if (::pipe(from_child) != 0) {
            ::close(to_child[0]);
            ::close(to_child[1]);
            throw std::runtime_error("pool: pipe() failed");
        }
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error("pool: fork() failed");
        if (pid == 0) {
            ::dup2(to_child[0], STDIN_FILENO);
            ::dup2(from_child[1], STDOUT_FILENO);
            ::close(to_child[0]);
            ::close(to_child[1]);
            ::close(from_child[0]);
            ::close(from_child[1]);
            ::execl("/bin/sh", "sh", "-c", cfg.command.c_str(),
                    static_cast<char*>(nullptr));
            _exit(127);
        }
        ::close(to_child[0]);
        ::close(from_child[1]);
        slot.in_fd = to_child[1];
        slot.out_fd = from_child[0];
        slot.pid = pid;
        set_nonblocking(slot.in_fd);
        set_nonblocking(slot.out_fd);
        slot.alive = true;
    }

    void connect_socket(Slot& slot) {
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const std::string port = std::to_string(cfg.port);
        if (::getaddrinfo(cfg.host.c_str(), port.c_str(), &hints, &res) != 0)
            return;  // dead slot; the spawn-failure budget decides
        int fd = -1;
        for (addrinfo* ai = res; ai; ai = ai->ai_next) {
            fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) continue;
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
            ::close(fd);
            fd = -1;
        }
        ::freeaddrinfo(res);
        if (fd < 0) return;
        slot.in_fd = fd;
        slot.out_fd = ::dup(fd);
        set_nonblocking(slot.in_fd);
        set_nonblocking(slot.out_fd);
        slot.alive = true;
    }

    std::vector<EvalResponse> run_external(std::vector<EvalRequest>& reqs) {
        try {
            return run_external_inner(reqs);
        } catch (...) {
            // Outstanding indices refer to this batch; no slot state may
            // survive into the next one.
            for (auto& slot : slots) close_slot(slot);
            throw;
        }
    }

    std::vector<EvalResponse> run_external_inner(std::vector<EvalRequest>& reqs) {
        const std::size_t n = reqs.size();
        std::vector<EvalResponse> out(n);
        std::vector<bool> have(n, false);
        std::vector<int> retries(n, 0);
        std::deque<std::size_t> pending;
        for (std::size_t i = 0; i < n; ++i) pending.push_back(i);
        std::size_t done = 0;
        int spawn_failures = 0;
        const int spawn_budget = (cfg.max_retries + 1) * cfg.n_workers;

        auto fail_slot = [&](Slot& slot, const std::string& reason) {
            for (const std::size_t idx : slot.outstanding) {
                if (have[idx]) continue;
                if (++retries[idx] > cfg.max_retries)
                    throw EvalError(
                        "evaluation failed after retries: " + reason,
                        batch_error_json(reason, reqs[idx].id, retries[idx]));
                pending.push_back(idx);
            }
            close_slot(slot);
        };

        for (auto& slot : slots) slot.last_progress = Clock::now();

        while (done < n) {
            // Revive dead slots while there is work left to hand out.
            for (auto& slot : slots) {
                if (slot.alive || pending.empty()) continue;
                spawn(slot);
                if (slot.alive) {
                    spawn_failures = 0;
                } else if (++spawn_failures > spawn_budget) {
                    throw EvalError(
                        "cannot start workers",
                        batch_error_json("worker spawn/connect failed",
                                         reqs[pending.front()].id, spawn_failures));
                }
            }

            // Top up each live slot to the pipelining depth.
            for (auto& slot : slots) {
                if (!slot.alive) continue;
                while (slot.outstanding.size() <
                           static_cast<std::size_t>(cfg.queue_depth) &&
                       !pending.empty()) {
                    const std::size_t idx = pending.front();
                    pending.pop_front();
                    slot.wbuf += encode_request(reqs[idx]);
                    slot.wbuf += '\n';
                    slot.outstanding.push_back(idx);
                }
            }

            std::vector<pollfd> fds;
            std::vector<Slot*> fd_owner;
            for (auto& slot : slots) {
                if (!slot.alive) continue;
                if (!slot.outstanding.empty()) {
                    fds.push_back({slot.out_fd, POLLIN, 0});
                    fd_owner.push_back(&slot);
                }
                if (!slot.wbuf.empty()) {
                    fds.push_back({slot.in_fd, POLLOUT, 0});
                    fd_owner.push_back(&slot);
                }
            }
            if (fds.empty()) {
                // All remaining work is pending on dead slots; back off a
                // little before the next spawn attempt.
                std::this_thread::sleep_for(std::chrono::milliseconds(20));
                continue;
            }

            ::poll(fds.data(), static_cast<nfds_t>(fds.size()), 50);

            for (std::size_t k = 0; k < fds.size(); ++k) {
                Slot& slot = *fd_owner[k];
                if (!slot.alive) continue;

                if (fds[k].revents & POLLOUT) {
                    const ssize_t w =
                        ::write(slot.in_fd, slot.wbuf.data(), slot.wbuf.size());
                    if (w > 0) {
                        slot.wbuf.erase(0, static_cast<std::size_t>(w));
                        slot.last_progress = Clock::now();
                    } else if (w < 0 && errno != EAGAIN && errno != EWOULDBLOCK) {
                        fail_slot(slot, "write to worker failed");
                        continue;
                    }
                }

                if (fds[k].revents & (POLLIN | POLLHUP | POLLERR)) {
                    char buf[4096];
                    const ssize_t r = ::read(slot.out_fd, buf, sizeof buf);
                    if (r == 0) {
                        fail_slot(slot, "worker closed its output");
                        continue;
                    }
                    if (r < 0) {
                        if (errno != EAGAIN && errno != EWOULDBLOCK)
                            fail_slot(slot, "read from worker failed");
                        continue;
                    }
                    slot.rbuf.append(buf, static_cast<std::size_t>(r));
                    slot.last_progress = Clock::now();

                    std::size_t nl;
                    while (slot.alive &&
                           (nl = slot.rbuf.find('\n')) != std::string::npos) {
                        const std::string line = slot.rbuf.substr(0, nl);
                        slot.rbuf.erase(0, nl + 1);
                        if (line.empty()) continue;
                        EvalResponse resp;
                        try {
                            resp = decode_response(line);
                        } catch (const std::exception& e) {
                            fail_slot(slot, std::string("bad response: ") + e.what());
                            break;
                        }
                        auto it = slot.outstanding.begin();
                        for (; it != slot.outstanding.end(); ++it)
                            if (reqs[*it].id == resp.id) break;
                        if (it == slot.outstanding.end()) {
                            fail_slot(slot, "response id was never requested");
                            break;
                        }
                        const std::size_t idx = *it;
                        slot.outstanding.erase(it);
                        if (!have[idx]) {
                            have[idx] = true;
                            out[idx] = resp;
                            ++done;
                        }
                    }
                }
            }

            // Stall detection: any slot sitting on work without progress.
            const auto now = Clock::now();
            for (auto& slot : slots) {
                if (!slot.alive || slot.outstanding.empty()) continue;
                const auto idle =
                    std::chrono::duration_cast<std::chrono::milliseconds>(
                        now - slot.last_progress)
                        .count();
                if (idle > cfg.timeout_ms) fail_slot(slot, "worker timed out");
            }
        }
        return out;
    }
};

EvalPool::EvalPool(PoolConfig cfg, ObjectiveFn objective)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(objective))) {}

EvalPool::~EvalPool() = default;

std::vector<EvalResponse> EvalPool::submit_batch(std::vector<EvalRequest> requests) {
    if (requests.empty()) return {};
    std::unordered_set<std::int64_t> ids;
    ids.reserve(requests.size());
    for (const auto& r : requests)
        if (!ids.insert(r.id).second)
            throw std::invalid_argument("submit_batch: duplicate request id " +
                                        std::to_string(r.id));

    impl_->total += requests.size();
    std::vector<EvalResponse> out =
        impl_->cfg.backend == PoolBackend::InProcess
            ? impl_->run_in_process(requests)
            : impl_->run_external(requests);
    std::sort(out.begin(), out.end(),
              [](const EvalResponse& a, const EvalResponse& b) { return a.id < b.id; });
    return out;
}

std::uint64_t EvalPool::total_evals() const { return impl_->total.load(); }

const PoolConfig& EvalPool::config() const { return impl_->cfg; }

}  // namespace riskeval
