// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "bdlm/decoder.hpp"
#include "bdlm/model.hpp"
#include "json.hpp"

namespace bdlm {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  uint16_t port = 0;  // 0 = pick a free port
  int64_t max_queue = 64;
  DecodePolicy policy;  // defaults for GENERATE requests without a policy

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

/// Per-prompt result of a generation batch.
struct GenerateItem {
  bool ok = false;
  Trajectory trajectory;  // trajectory.version names the weights that produced it
  std::string error;
};

void to_json(nlohmann::json& j, const GenerateItem& g);
void from_json(const nlohmann::json& j, GenerateItem& g);

/// Reader/writer lease that lets a waiting writer in ahead of new readers.
class SwapLease {
 public:
  void lock_shared();
  void unlock_shared();
  void lock();
  void unlock();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int64_t readers_ = 0;
  int64_t writers_waiting_ = 0;
  bool writing_ = false;
};

/// Model held in memory for the whole service lifetime. Generations hold a
/// read lease on one weight version; updates wait for in-flight generations
/// to drain and then swap atomically.
class RolloutService {
 public:
  /// Takes ownership of already-loaded params (counts as the single load).
  RolloutService(ModelParams params, ServiceConfig config = {});
  /// Reads the checkpoint once.
  static std::unique_ptr<RolloutService> from_checkpoint(const std::filesystem::path& path, ServiceConfig config = {});

  /// Item i is generated with seed policy.seed + i. Throws ServiceError when
  /// the request queue is full.
  std::vector<GenerateItem> generate_batch(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy);
  std::vector<GenerateItem> generate_batch(const std::vector<std::vector<int32_t>>& prompts) {
    return generate_batch(prompts, config_.policy);
  }

  /// Swaps in weights from a checkpoint-format blob. A blob that does not
  /// match the serving config is rejected and the old version stays live.
  uint64_t update_weights(std::string_view blob);
  /// In-process variant: the params are copied, nothing is serialized.
  uint64_t update_weights(const ModelParams& params);

  uint64_t version() const;
  int64_t loads() const { return loads_; }
  int64_t requests() const { return requests_; }
  /// Generation requests currently admitted (running or waiting for a lease).
  int64_t in_flight() const { return queued_; }
  std::map<uint64_t, int64_t> version_counts() const;
  const ServiceConfig& config() const { return config_; }
  const ModelConfig& model_config() const { return model_config_; }

 private:
  uint64_t swap_in(ModelParams params);

  ServiceConfig config_;
  ModelConfig model_config_;
  mutable SwapLease lease_;
  std::shared_ptr<const ModelParams> current_;  // guarded by lease_
  int64_t loads_ = 0;
  std::atomic<int64_t> requests_{0};
  std::atomic<int64_t> queued_{0};
  mutable std::mutex stats_mu_;
  std::map<uint64_t, int64_t> version_counts_;
};

// ---- wire protocol -------------------------------------------------------
// Each frame: 4-byte big-endian length, then UTF-8 JSON {"kind": ..., "body": ...}.
// Request kinds GENERATE, UPDATE_WEIGHTS, VERSION, SHUTDOWN; replies carry the
// request kind with an "_OK" suffix, or kind "ERROR" with body {"message"}.

std::string base64_encode(std::string_view bytes);
/// Throws FormatError on malformed input.
std::string base64_decode(std::string_view text);

/// Dispatches one decoded request against `service`. Never throws; failures
/// become ERROR replies.
nlohmann::json handle_request(RolloutService& service, const nlohmann::json& request, bool& shutdown);

/// Stream-socket front end for a RolloutService.
class ServiceServer {
 public:
  /// Binds immediately; throws ServiceError when the address is taken.
  ServiceServer(RolloutService& service, const std::string& host, uint16_t port);
  ~ServiceServer();
  ServiceServer(const ServiceServer&) = delete;
  ServiceServer& operator=(const ServiceServer&) = delete;

  uint16_t port() const { return port_; }
  void start();
  /// Blocks until a SHUTDOWN request arrives or stop() is called.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  uint16_t port_ = 0;
};

class ServiceClient {
 public:
  ServiceClient(const std::string& host, uint16_t port);
  ~ServiceClient();
  ServiceClient(const ServiceClient&) = delete;
  ServiceClient& operator=(const ServiceClient&) = delete;

  /// Sends one frame and waits for its reply. Throws ServiceError on transport
  /// failure or an ERROR reply.
  nlohmann::json request(const std::string& kind, const nlohmann::json& body);
  /// Raw round trip; ERROR replies are returned, not thrown.
  nlohmann::json exchange(const nlohmann::json& message);

  std::vector<GenerateItem> generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy);
  uint64_t update_weights(const ModelParams& params);
  uint64_t version();
  int64_t loads();
  void shutdown();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bdlm
