"""Test suite for ccl_rec."""
