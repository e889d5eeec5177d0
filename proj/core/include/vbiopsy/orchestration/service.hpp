#pragma once

#include <memory>
#include <string>

#include "vbiopsy/orchestration/config.hpp"
#include "vbiopsy/orchestration/storage.hpp"

namespace httplib {
class Server;
}

namespace vbiopsy::orchestration {

/// JSON-over-HTTP front end for the reader workbench. Trial mutations go
/// through TrialStore; model inference is loaded lazily and serialized.
class Service {
 public:
  explicit Service(PipelineConfig cfg, Clock clock = system_clock());
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Returns the chosen port.
  int bind_any_port(const std::string& host = "127.0.0.1");
  bool bind(const std::string& host, int port);
  /// Blocks until stop().
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

  httplib::Server& server();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// HTTP status for a library error code.
int http_status(ErrorCode code);

}  // namespace vbiopsy::orchestration
