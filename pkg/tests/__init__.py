# Tests package for the q-space structure toolkit
