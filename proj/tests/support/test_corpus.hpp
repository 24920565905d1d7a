#pragma once

#include <cstdlib>
#include <string>

/// Corpus used by data-dependent tests: SATLAB_TEST_CORPUS if set, else the bundled text.
inline std::string test_corpus_path() {
  if (const char* env = std::getenv("SATLAB_TEST_CORPUS")) return env;
  return SATLAB_TEST_CORPUS_DEFAULT;
}
