// SPDX-License-Identifier: Apache-2.0

#include "bdlm/rollout_service.hpp"

#include <sodium.h>
#include <sys/socket.h>

#include <array>
#include <boost/asio.hpp>
#include <list>

#include "bdlm/error.hpp"

namespace bdlm {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;
using nlohmann::json;

void ServiceConfig::validate() const {
  if (host.empty()) throw ConfigError("service.host: must not be empty");
  if (max_queue < 1) throw ConfigError("service.max_queue: must be >= 1");
  policy.validate();
}

void to_json(json& j, const ServiceConfig& c) {
  j = json{{"host", c.host}, {"port", c.port}, {"max_queue", c.max_queue}, {"policy", c.policy}};
}

void from_json(const json& j, ServiceConfig& c) {
  ServiceConfig d;
  d.host = j.value("host", d.host);
  d.port = j.value("port", d.port);
  d.max_queue = j.value("max_queue", d.max_queue);
  if (j.contains("policy")) j.at("policy").get_to(d.policy);
  c = d;
}

void to_json(json& j, const GenerateItem& g) {
  if (g.ok) {
    j = json{{"ok", true}, {"trajectory", g.trajectory}};
  } else {
    j = json{{"ok", false}, {"error", g.error}};
  }
}

void from_json(const json& j, GenerateItem& g) {
  g = GenerateItem{};
  g.ok = j.at("ok").get<bool>();
  if (g.ok) {
    j.at("trajectory").get_to(g.trajectory);
  } else {
    g.error = j.value("error", std::string());
  }
}

// ---- lease -----------------------------------------------------------------

void SwapLease::lock_shared() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [&] { return !writing_ && writers_waiting_ == 0; });
  ++readers_;
}

void SwapLease::unlock_shared() {
  std::lock_guard lk(mu_);
  if (--readers_ == 0) cv_.notify_all();
}

void SwapLease::lock() {
  std::unique_lock lk(mu_);
  ++writers_waiting_;
  cv_.wait(lk, [&] { return !writing_ && readers_ == 0; });
  --writers_waiting_;
  writing_ = true;
}

void SwapLease::unlock() {
  std::lock_guard lk(mu_);
  writing_ = false;
  cv_.notify_all();
}

// ---- service ---------------------------------------------------------------

RolloutService::RolloutService(ModelParams params, ServiceConfig config)
    : config_(std::move(config)), model_config_(params.config) {
  config_.validate();
  params.version = 1;
  current_ = std::make_shared<const ModelParams>(std::move(params));
  loads_ = 1;
}

std::unique_ptr<RolloutService> RolloutService::from_checkpoint(const std::filesystem::path& path, ServiceConfig config) {
  ModelParams params;
  try {
    params = load_checkpoint(path);
  } catch (const Error& e) {
    throw ServiceError(std::string("service startup: ") + e.what());
  }
  return std::make_unique<RolloutService>(std::move(params), std::move(config));
}

std::vector<GenerateItem> RolloutService::generate_batch(const std::vector<std::vector<int32_t>>& prompts,
                                                         const DecodePolicy& policy) {
  ++requests_;
  if (queued_.fetch_add(1) >= config_.max_queue) {
    --queued_;
    throw ServiceError("request queue full (" + std::to_string(config_.max_queue) + "), retry later");
  }
  struct Release {
    std::atomic<int64_t>& q;
    ~Release() { --q; }
  } release{queued_};
  policy.validate();

  std::vector<GenerateItem> out(prompts.size());
  std::map<uint64_t, int64_t> produced;
  for (size_t i = 0; i < prompts.size(); ++i) {
    DecodePolicy item_policy = policy;
    item_policy.seed = policy.seed + i;
    lease_.lock_shared();
    const std::shared_ptr<const ModelParams> params = current_;
    try {
      out[i].trajectory = generate(*params, prompts[i], item_policy);
      out[i].trajectory.version = params->version;
      out[i].ok = true;
      ++produced[params->version];
    } catch (const Error& e) {
      out[i].error = e.what();
    }
    lease_.unlock_shared();
  }
  std::lock_guard lk(stats_mu_);
  for (const auto& [v, n] : produced) version_counts_[v] += n;
  return out;
}

uint64_t RolloutService::swap_in(ModelParams params) {
  ModelConfig incoming = params.config;
  incoming.seed = model_config_.seed;  // init seed does not affect shapes or decoding
  if (!(incoming == model_config_)) {
    throw ServiceError("weight update does not match the serving model config");
  }
  lease_.lock();
  params.version = current_->version + 1;
  const uint64_t v = params.version;
  current_ = std::make_shared<const ModelParams>(std::move(params));
  lease_.unlock();
  return v;
}

uint64_t RolloutService::update_weights(std::string_view blob) {
  ++requests_;
  ModelParams params;
  try {
    params = deserialize_params(blob);
  } catch (const Error& e) {
    throw ServiceError(std::string("weight update rejected: ") + e.what());
  }
  return swap_in(std::move(params));
}

uint64_t RolloutService::update_weights(const ModelParams& params) {
  ++requests_;
  return swap_in(params);
}

uint64_t RolloutService::version() const {
  lease_.lock_shared();
  const uint64_t v = current_->version;
  lease_.unlock_shared();
  return v;
}

std::map<uint64_t, int64_t> RolloutService::version_counts() const {
  std::lock_guard lk(stats_mu_);
  return version_counts_;
}

// ---- encoding --------------------------------------------------------------

namespace {

void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw ServiceError("libsodium initialisation failed");
}

}  // namespace

std::string base64_encode(std::string_view bytes) {
  ensure_sodium();
  constexpr int variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_encoded_len(bytes.size(), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), variant);
  out.resize(out.size() - 1);  // trailing NUL
  return out;
}

std::string base64_decode(std::string_view text) {
  ensure_sodium();
  std::string out(text.size() / 4 * 3 + 3, '\0');
  size_t len = 0;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(), text.size(), nullptr, &len,
                        nullptr, sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw FormatError("malformed base64 payload");
  }
  out.resize(len);
  return out;
}

// ---- dispatch --------------------------------------------------------------

json handle_request(RolloutService& service, const json& request, bool& shutdown) {
  auto error = [](const std::string& msg) { return json{{"kind", "ERROR"}, {"body", {{"message", msg}}}}; };
  try {
    if (!request.is_object() || !request.contains("kind")) return error("request must be an object with a 'kind'");
    const std::string kind = request.at("kind").get<std::string>();
    const json body = request.value("body", json::object());
    if (kind == "GENERATE") {
      const auto prompts = body.at("prompts").get<std::vector<std::vector<int32_t>>>();
      DecodePolicy policy = service.config().policy;
      if (body.contains("policy")) body.at("policy").get_to(policy);
      return json{{"kind", "GENERATE_OK"}, {"body", {{"items", service.generate_batch(prompts, policy)}}}};
    }
    if (kind == "UPDATE_WEIGHTS") {
      const std::string blob = base64_decode(body.at("blob").get<std::string>());
      return json{{"kind", "UPDATE_WEIGHTS_OK"}, {"body", {{"version", service.update_weights(blob)}}}};
    }
    if (kind == "VERSION") {
      return json{{"kind", "VERSION_OK"}, {"body", {{"version", service.version()}, {"loads", service.loads()}}}};
    }
    if (kind == "SHUTDOWN") {
      shutdown = true;
      return json{{"kind", "SHUTDOWN_OK"}, {"body", json::object()}};
    }
    return error("unknown request kind '" + kind + "'");
  } catch (const std::exception& e) {
    return error(e.what());
  }
}

// ---- framing ---------------------------------------------------------------

namespace {

constexpr uint32_t kMaxFrame = 1u << 30;

void write_frame(tcp::socket& sock, const json& message) {
  const std::string payload = message.dump();
  if (payload.size() > kMaxFrame) throw ServiceError("frame too large");
  const auto n = static_cast<uint32_t>(payload.size());
  const std::array<unsigned char, 4> header = {static_cast<unsigned char>(n >> 24), static_cast<unsigned char>(n >> 16),
                                               static_cast<unsigned char>(n >> 8), static_cast<unsigned char>(n)};
  const std::array<asio::const_buffer, 2> bufs = {asio::buffer(header), asio::buffer(payload)};
  asio::write(sock, bufs);
}

// Returns false on a clean EOF before the header.
bool read_frame(tcp::socket& sock, std::string& payload) {
  std::array<unsigned char, 4> header{};
  boost::system::error_code ec;
  asio::read(sock, asio::buffer(header), ec);
  if (ec == asio::error::eof) return false;
  if (ec) throw boost::system::system_error(ec);
  const uint32_t n = (uint32_t{header[0]} << 24) | (uint32_t{header[1]} << 16) | (uint32_t{header[2]} << 8) | header[3];
  if (n > kMaxFrame) throw ServiceError("incoming frame exceeds size limit");
  payload.assign(n, '\0');
  asio::read(sock, asio::buffer(payload));
  return true;
}

}  // namespace

struct ServiceServer::Impl {
  RolloutService& service;
  asio::io_context io;
  tcp::acceptor acceptor{io};
  std::thread accept_thread;
  std::mutex mu;
  std::condition_variable cv;
  bool stopping = false;
  bool shutdown_requested = false;
  std::list<std::shared_ptr<tcp::socket>> sockets;
  std::list<std::thread> workers;

  explicit Impl(RolloutService& s) : service(s) {}

  void serve_connection(std::shared_ptr<tcp::socket> sock) {
    try {
      std::string payload;
      while (read_frame(*sock, payload)) {
        bool shutdown = false;
        json reply;
        const json request = json::parse(payload, nullptr, false);
        if (request.is_discarded()) {
          reply = json{{"kind", "ERROR"}, {"body", {{"message", "request is not valid JSON"}}}};
        } else {
          reply = handle_request(service, request, shutdown);
        }
        write_frame(*sock, reply);
        if (shutdown) {
          std::lock_guard lk(mu);
          shutdown_requested = true;
          cv.notify_all();
        }
      }
    } catch (const std::exception&) {
      // Peer went away or sent a broken frame; drop the connection.
    }
  }

  void accept_loop() {
    for (;;) {
      auto sock = std::make_shared<tcp::socket>(io);
      boost::system::error_code ec;
      acceptor.accept(*sock, ec);
      std::lock_guard lk(mu);
      if (stopping) return;
      if (ec) continue;
      sockets.push_back(sock);
      workers.emplace_back([this, sock] { serve_connection(sock); });
    }
  }
};

ServiceServer::ServiceServer(RolloutService& service, const std::string& host, uint16_t port)
    : impl_(std::make_unique<Impl>(service)) {
  try {
    const tcp::endpoint ep(asio::ip::make_address(host), port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
    port_ = impl_->acceptor.local_endpoint().port();
  } catch (const std::exception& e) {
    throw ServiceError("cannot bind " + host + ":" + std::to_string(port) + ": " + e.what());
  }
}

ServiceServer::~ServiceServer() { stop(); }

void ServiceServer::start() {
  impl_->accept_thread = std::thread([this] { impl_->accept_loop(); });
}

void ServiceServer::wait() {
  std::unique_lock lk(impl_->mu);
  impl_->cv.wait(lk, [&] { return impl_->shutdown_requested || impl_->stopping; });
}

void ServiceServer::stop() {
  {
    std::lock_guard lk(impl_->mu);
    if (impl_->stopping) return;
    impl_->stopping = true;
    impl_->cv.notify_all();
    ::shutdown(impl_->acceptor.native_handle(), SHUT_RDWR);
    for (auto& s : impl_->sockets) ::shutdown(s->native_handle(), SHUT_RDWR);
  }
  if (impl_->accept_thread.joinable()) impl_->accept_thread.join();
  for (auto& w : impl_->workers) {
    if (w.joinable()) w.join();
  }
  boost::system::error_code ec;
  impl_->acceptor.close(ec);
}

struct ServiceClient::Impl {
  asio::io_context io;
  tcp::socket sock{io};
};

ServiceClient::ServiceClient(const std::string& host, uint16_t port) : impl_(std::make_unique<Impl>()) {
  try {
    impl_->sock.connect(tcp::endpoint(asio::ip::make_address(host), port));
  } catch (const std::exception& e) {
    throw ServiceError("cannot connect to " + host + ":" + std::to_string(port) + ": " + e.what());
  }
}

ServiceClient::~ServiceClient() = default;

json ServiceClient::exchange(const json& message) {
  try {
    write_frame(impl_->sock, message);
    std::string payload;
    if (!read_frame(impl_->sock, payload)) throw ServiceError("service closed the connection");
    return json::parse(payload);
  } catch (const ServiceError&) {
    throw;
  } catch (const std::exception& e) {
    throw ServiceError(std::string("transport failure: ") + e.what());
  }
}

json ServiceClient::request(const std::string& kind, const json& body) {
  const json reply = exchange(json{{"kind", kind}, {"body", body}});
  if (reply.value("kind", std::string()) == "ERROR") {
    throw ServiceError(reply.at("body").value("message", std::string("unknown service error")));
  }
  return reply.at("body");
}

std::vector<GenerateItem> ServiceClient::generate(const std::vector<std::vector<int32_t>>& prompts, const DecodePolicy& policy) {
  return request("GENERATE", json{{"prompts", prompts}, {"policy", policy}}).at("items").get<std::vector<GenerateItem>>();
}

uint64_t ServiceClient::update_weights(const ModelParams& params) {
  return request("UPDATE_WEIGHTS", json{{"blob", base64_encode(serialize_params(params))}}).at("version").get<uint64_t>();
}

uint64_t ServiceClient::version() { return request("VERSION", json::object()).at("version").get<uint64_t>(); }

int64_t ServiceClient::loads() { return request("VERSION", json::object()).at("loads").get<int64_t>(); }

void ServiceClient::shutdown() { request("SHUTDOWN", json::object()); }

}  // namespace bdlm
