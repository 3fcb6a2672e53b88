#include "deltapress/error.hpp"

namespace deltapress {

void rethrow_with_tensor(const Error& e, const std::string& tensor) {
  const std::string msg = "tensor '" + tensor + "': " + e.what();
  switch (e.kind()) {
    case ErrorKind::kConfig:
      throw ConfigError(msg);
    case ErrorKind::kData:
      throw DataError(msg);
    case ErrorKind::kNumerical:
      throw NumericalError(msg);
  }
  throw Error(e.kind(), msg);
}

}  // namespace deltapress
