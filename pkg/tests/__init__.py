# Tests package for loract
