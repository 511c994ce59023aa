# Test package for volterra_lab
