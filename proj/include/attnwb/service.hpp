#pragma once

#include "attnwb/config.hpp"

#include <memory>
#include <string>

namespace attnwb {

// HTTP JSON API over one loaded checkpoint and its dataset splits.
class Service {
 public:
  // Loads config.service.checkpoint and the data section; throws on missing
  // artifacts.
  explicit Service(RunConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Blocks until stop().
  void listen(const std::string& host, int port);
  // Binds an ephemeral port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace attnwb
