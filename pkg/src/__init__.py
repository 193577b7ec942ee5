"""Low-resource multilingual translation toolkit modules."""
