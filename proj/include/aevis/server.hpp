#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>

namespace aevis {

struct ServerConfig {
  std::string host = "127.0.0.1";
  /// 0 binds any free port.
  int port = 8080;
  std::filesystem::path data_dir = "aevis-data";
  std::size_t workers = 2;
  std::string cors_origin = "*";
};

/// HTTP front end over the analysis library. Models, sessions, datapaths and
/// finished job results live in a DocumentStore under `data_dir` and are
/// reloaded on construction; jobs that were pending or running when the
/// previous process stopped come back as failed. Route table in
/// docs/formats.md.
class AnalysisServer {
 public:
  explicit AnalysisServer(ServerConfig config);
  ~AnalysisServer();

  AnalysisServer(const AnalysisServer&) = delete;
  AnalysisServer& operator=(const AnalysisServer&) = delete;

  /// Binds the listening socket and returns the port. Throws on failure.
  int bind();
  /// Serves until stop(); binds first if needed.
  void run();
  /// bind() and serve on a background thread.
  void start();
  /// Stops accepting requests, drops queued jobs (they stay pending on disk)
  /// and waits for running ones.
  void stop();

  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace aevis
