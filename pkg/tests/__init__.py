# Test package for speech-mrl
