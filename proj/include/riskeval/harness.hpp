#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "riskeval/objectives.hpp"

namespace riskeval {

// Unrecoverable evaluation failure (objective threw, or an external worker
// kept failing past its retry budget). Carries a one-line JSON diagnostic
// suitable for printing on stderr before a non-zero exit.
class EvalError : public std::runtime_error {
  public:
    EvalError(const std::string& what, std::string diagnostic_json)
        : std::runtime_error(what), diagnostic_(std::move(diagnostic_json)) {}
    const std::string& diagnostic() const { return diagnostic_; }

  private:
    std::string diagnostic_;
};

// One objective evaluation, shipped to a worker as a single NDJSON line.
// Ids are unique within a batch and every response is matched back by id,
// so the reduction is independent of completion order and worker count.
struct EvalRequest {
    std::int64_t id = 0;
    std::uint64_t seed = 0;
    std::vector<double> latent;
    std::vector<double> scenario;
};

struct EvalResponse {
    std::int64_t id = 0;
    double objective = 0.0;
    std::int64_t wall_ms = 0;
};

// Wire codecs. Field order on encode is fixed: requests are
// {"id","seed","latent","scenario"}, responses {"id","objective","wall_ms"}.
// Decoding is strict: unknown fields, missing fields, or non-finite numbers
// raise std::runtime_error naming the offending field.
std::string encode_request(const EvalRequest& req);
EvalRequest decode_request(std::string_view line);
std::string encode_response(const EvalResponse& resp);
EvalResponse decode_response(std::string_view line);

enum class PoolBackend { InProcess, Command, Tcp };

struct PoolConfig {
    PoolBackend backend = PoolBackend::InProcess;
    int n_workers = 1;
    // Command backend: shell command started once per worker slot; it reads
    // request lines on stdin and must write one flushed response line per
    // request, in order.
    std::string command;
    // Tcp backend: every worker slot opens one connection here and speaks
    // the same line protocol.
    std::string host = "127.0.0.1";
    int port = 0;
    // A worker slot with no progress for this long is considered dead; its
    // outstanding requests are retried on a fresh worker.
    int timeout_ms = 30000;
    // Per-request retry budget before the whole batch fails.
    int max_retries = 2;
    // Outstanding requests allowed per worker slot (pipelining depth).
    int queue_depth = 4;
};

// Evaluation pool over one of three interchangeable backends. submit_batch
// returns responses sorted by id; every id in the input appears exactly once
// in the output or the call throws. The in-process backend runs the given
// objective on a thread pool; external backends never touch it.
class EvalPool {
  public:
    EvalPool(PoolConfig cfg, ObjectiveFn objective);
    ~EvalPool();
    EvalPool(const EvalPool&) = delete;
    EvalPool& operator=(const EvalPool&) = delete;

    std::vector<EvalResponse> submit_batch(std::vector<EvalRequest> requests);

    // Unique request ids submitted so far (retries are not double counted).
    std::uint64_t total_evals() const;

    const PoolConfig& config() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace riskeval
