# refuse every output
default: fail
