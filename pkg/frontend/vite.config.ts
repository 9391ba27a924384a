import { defineConfig } from "vite";

// The dev server proxies /api to a locally running service process
// (`guide serve ... --port 8080`), so the page itself never needs CORS.
export default defineConfig({
  server: {
    proxy: {
      "/api": {
        target: process.env.GUIDE_SERVICE ?? "http://127.0.0.1:8080",
        changeOrigin: true,
        rewrite: (path) => path.replace(/^\/api/, ""),
      },
    },
  },
});
